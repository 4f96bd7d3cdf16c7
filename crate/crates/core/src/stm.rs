//! Short-term memory: the last K user queries of a session.
//!
//! Turns pushed out of the window are handed back to the caller, which queues
//! them for consolidation. The window itself never writes long-term memory.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::chunk_store::ChunkId;
use crate::clock::Timestamp;

pub const DEFAULT_CAPACITY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub chunk_id: ChunkId,
    pub query_text: String,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StmError {
    #[error("window capacity must be at least 1 (got {0})")]
    InvalidCapacity(usize),
    #[error("turn text is empty")]
    EmptyTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StmWindow {
    capacity: usize,
    turns: VecDeque<Turn>,
}

impl Default for StmWindow {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
            turns: VecDeque::with_capacity(DEFAULT_CAPACITY),
        }
    }
}

impl StmWindow {
    pub fn new(capacity: usize) -> Result<Self, StmError> {
        if capacity == 0 {
            return Err(StmError::InvalidCapacity(capacity));
        }
        Ok(Self {
            capacity,
            turns: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Oldest first.
    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter()
    }

    /// Appends `turn` as the newest entry, returning the oldest turn if the window was full.
    pub fn push(&mut self, turn: Turn) -> Result<Option<Turn>, StmError> {
        if turn.query_text.trim().is_empty() {
            return Err(StmError::EmptyTurn);
        }
        let evicted = if self.turns.len() == self.capacity {
            self.turns.pop_front()
        } else {
            None
        };
        self.turns.push_back(turn);
        Ok(evicted)
    }

    /// Query texts oldest to newest, newline separated.
    pub fn window_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.query_text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Changes the capacity, evicting oldest turns first until they fit.
    pub fn resize(&mut self, capacity: usize) -> Result<Vec<Turn>, StmError> {
        if capacity == 0 {
            return Err(StmError::InvalidCapacity(capacity));
        }
        self.capacity = capacity;
        let excess = self.turns.len().saturating_sub(capacity);
        Ok(self.turns.drain(..excess).collect())
    }

    /// Swaps the turn backed by `old` for a corrected one in place.
    pub fn replace(&mut self, old: &ChunkId, turn: Turn) -> bool {
        match self.turns.iter_mut().find(|t| &t.chunk_id == old) {
            Some(slot) => {
                *slot = turn;
                true
            }
            None => false,
        }
    }

    /// Drops the turn backed by `id`, if present.
    pub fn remove(&mut self, id: &ChunkId) -> Option<Turn> {
        let pos = self.turns.iter().position(|t| &t.chunk_id == id)?;
        self.turns.remove(pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn turn(i: u64) -> Turn {
        Turn {
            chunk_id: ChunkId {
                sequence: i,
                digest: format!("{i:064x}"),
            },
            query_text: format!("q{i}"),
            timestamp: Timestamp(i as i64),
        }
    }

    fn seqs(w: &StmWindow) -> Vec<u64> {
        w.turns().map(|t| t.chunk_id.sequence).collect()
    }

    #[test]
    fn evicts_oldest_when_full() {
        let mut w = StmWindow::new(2).unwrap();
        assert_eq!(w.push(turn(1)).unwrap(), None);
        assert_eq!(w.push(turn(2)).unwrap(), None);
        assert_eq!(w.push(turn(3)).unwrap(), Some(turn(1)));
        assert_eq!(seqs(&w), vec![2, 3]);
    }

    #[test]
    fn partial_window_does_not_evict() {
        let mut w = StmWindow::new(3).unwrap();
        assert_eq!(w.push(turn(1)).unwrap(), None);
        assert_eq!(seqs(&w), vec![1]);
    }

    #[test]
    fn five_pushes_into_three_keep_last_three() {
        let mut w = StmWindow::new(3).unwrap();
        let pushed: Vec<u64> = (1..=5).collect();
        for &i in &pushed {
            w.push(turn(i)).unwrap();
        }
        let oracle = &pushed[pushed.len() - 3..];
        assert_eq!(seqs(&w), oracle);
    }

    #[test]
    fn window_text_joins_with_newlines() {
        let mut w = StmWindow::new(3).unwrap();
        assert_eq!(w.window_text(), "");
        let mut t = turn(0);
        t.query_text = "a".into();
        w.push(t.clone()).unwrap();
        assert_eq!(w.window_text(), "a");
        t.query_text = "b".into();
        w.push(t).unwrap();
        assert_eq!(w.window_text(), "a\nb");
    }

    #[test]
    fn resize_evicts_oldest_first() {
        let mut w = StmWindow::new(5).unwrap();
        for i in 0..4 {
            w.push(turn(i)).unwrap();
        }
        let evicted = w.resize(2).unwrap();
        assert_eq!(evicted, vec![turn(0), turn(1)]);
        assert_eq!(seqs(&w), vec![2, 3]);
        assert!(w.resize(2).unwrap().is_empty());
        assert_eq!(w.resize(0), Err(StmError::InvalidCapacity(0)));
        assert_eq!(StmWindow::new(0), Err(StmError::InvalidCapacity(0)));
    }

    #[test]
    fn empty_turn_rejected() {
        let mut w = StmWindow::default();
        let mut t = turn(0);
        t.query_text = "  ".into();
        assert_eq!(w.push(t), Err(StmError::EmptyTurn));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Push,
        Resize(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![4 => Just(Op::Push), 1 => (1usize..8).prop_map(Op::Resize)]
    }

    proptest! {
        #[test]
        fn matches_list_slicing_oracle(cap in 1usize..8, ops in prop::collection::vec(op(), 0..200)) {
            let mut w = StmWindow::new(cap).unwrap();
            let mut pushed: Vec<u64> = Vec::new();
            let mut evicted: Vec<u64> = Vec::new();
            // oracle: the window is a suffix of the push sequence whose length
            // is bounded by every capacity in force since each element arrived
            let mut oracle_start = 0usize;
            let mut k = cap;
            for (n, o) in ops.into_iter().enumerate() {
                match o {
                    Op::Push => {
                        pushed.push(n as u64);
                        if let Some(t) = w.push(turn(n as u64)).unwrap() {
                            evicted.push(t.chunk_id.sequence);
                        }
                        if pushed.len() - oracle_start > k { oracle_start += 1; }
                    }
                    Op::Resize(nk) => {
                        k = nk;
                        for t in w.resize(nk).unwrap() { evicted.push(t.chunk_id.sequence); }
                        oracle_start = oracle_start.max(pushed.len().saturating_sub(k));
                    }
                }
                prop_assert_eq!(seqs(&w), pushed[oracle_start..].to_vec());
                prop_assert_eq!(&evicted[..], &pushed[..oracle_start]);
                prop_assert!(w.len() <= w.capacity());
            }
        }
    }
}
