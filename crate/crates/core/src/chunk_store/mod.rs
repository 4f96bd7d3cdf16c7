//! Durable, append-only store of experience chunks.
//!
//! Chunks are never edited in place. Deletion writes a tombstone record and
//! an update writes a new chunk that supersedes (and thereby tombstones) the
//! old one in a single log record. The in-memory index is rebuilt from the
//! log on open.

mod log;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{Clock, Timestamp};
use crate::kind::MemoryKind;
use log::RecordLog;

pub const LOG_FORMAT: &str = "memverse-chunklog/1";
const MANIFEST_FILE: &str = "MANIFEST";
const LOG_FILE: &str = "chunks.log";

/// Identity of a stored chunk: its insertion sequence plus a content fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId {
    pub sequence: u64,
    pub digest: String,
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.sequence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
    Video,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            "text" => Ok(Modality::Text),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// Pointer to a piece of source media that a chunk was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MediaRef {
    pub uri: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_digest: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl MediaRef {
    pub fn new(uri: impl Into<String>, modality: Modality) -> Self {
        Self {
            uri: uri.into(),
            modality,
            byte_digest: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub content: String,
    pub session_id: String,
    pub turn_index: u64,
    pub created_at: Timestamp,
    #[serde(default)]
    pub media: Vec<MediaRef>,
    #[serde(default)]
    pub kind_hint: Option<MemoryKind>,
    /// Set when this chunk replaces an earlier one; the earlier chunk is tombstoned.
    #[serde(default)]
    pub supersedes: Option<ChunkId>,
}

/// Input to [`ChunkStore::put_chunk`].
#[derive(Debug, Clone, Default)]
pub struct NewChunk {
    pub content: String,
    pub session_id: String,
    pub turn_index: u64,
    pub media: Vec<MediaRef>,
    pub kind_hint: Option<MemoryKind>,
}

impl NewChunk {
    pub fn text(content: impl Into<String>, session_id: impl Into<String>, turn_index: u64) -> Self {
        Self {
            content: content.into(),
            session_id: session_id.into(),
            turn_index,
            ..Default::default()
        }
    }

    pub fn with_media(mut self, media: Vec<MediaRef>) -> Self {
        self.media = media;
        self
    }

    pub fn with_kind(mut self, kind: Option<MemoryKind>) -> Self {
        self.kind_hint = kind;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChunkError {
    #[error("turn {turn} of session `{session}` is already stored")]
    DuplicateTurn { session: String, turn: u64 },
    #[error("chunk content is empty")]
    EmptyContent,
    #[error("media reference has an empty uri")]
    InvalidMedia,
    #[error("chunk {0} not found")]
    NotFound(String),
    #[error("chunk {sequence} has been deleted")]
    Tombstoned { sequence: u64, superseded_by: Option<u64> },
    #[error("unsupported chunk log format `{0}`")]
    FormatVersion(String),
    #[error("corrupt chunk log record: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can count provenance references to a chunk (the graph, in practice).
pub trait ProvenanceIndex {
    fn reference_count(&self, chunk: &ChunkId) -> usize;
}

/// Used when no graph exists yet.
pub struct NoReferences;

impl ProvenanceIndex for NoReferences {
    fn reference_count(&self, _chunk: &ChunkId) -> usize {
        0
    }
}

/// Content fingerprint over `content ‖ session_id ‖ sorted media uris`.
///
/// Every field is prefixed by its byte length (u64 LE) so that field
/// boundaries cannot be shifted to produce a collision.
pub fn chunk_digest(content: &str, session_id: &str, media: &[MediaRef]) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(content.as_bytes());
    field(session_id.as_bytes());
    let mut uris: Vec<&str> = media.iter().map(|m| m.uri.as_str()).collect();
    uris.sort_unstable();
    h.update((uris.len() as u64).to_le_bytes());
    for uri in uris {
        h.update((uri.len() as u64).to_le_bytes());
        h.update(uri.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LogRecord {
    Put { chunk: Chunk },
    Tombstone { sequence: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TombstoneInfo {
    superseded_by: Option<u64>,
}

struct Slot {
    chunk: Arc<Chunk>,
    tombstone: Option<TombstoneInfo>,
}

#[derive(Default)]
struct State {
    slots: Vec<Slot>,
    /// live (session, turn) -> sequence
    sessions: HashMap<String, BTreeMap<u64, u64>>,
    live: usize,
}

impl State {
    fn apply(&mut self, record: LogRecord) -> Result<(), ChunkError> {
        match record {
            LogRecord::Put { chunk } => {
                let seq = chunk.id.sequence;
                if seq != self.slots.len() as u64 {
                    return Err(ChunkError::Corrupt(format!(
                        "sequence {seq} out of order (expected {})",
                        self.slots.len()
                    )));
                }
                if let Some(old) = &chunk.supersedes {
                    self.mark_tombstone(old.sequence, Some(seq))?;
                }
                self.sessions
                    .entry(chunk.session_id.clone())
                    .or_default()
                    .insert(chunk.turn_index, seq);
                self.slots.push(Slot {
                    chunk: Arc::new(chunk),
                    tombstone: None,
                });
                self.live += 1;
            }
            LogRecord::Tombstone { sequence } => self.mark_tombstone(sequence, None)?,
        }
        Ok(())
    }

    fn mark_tombstone(&mut self, sequence: u64, superseded_by: Option<u64>) -> Result<(), ChunkError> {
        let slot = self
            .slots
            .get_mut(sequence as usize)
            .ok_or_else(|| ChunkError::Corrupt(format!("tombstone for unknown chunk {sequence}")))?;
        if slot.tombstone.is_some() {
            return Err(ChunkError::Corrupt(format!("chunk {sequence} tombstoned twice")));
        }
        slot.tombstone = Some(TombstoneInfo { superseded_by });
        let chunk = slot.chunk.clone();
        if let Some(turns) = self.sessions.get_mut(&chunk.session_id) {
            if turns.get(&chunk.turn_index) == Some(&sequence) {
                turns.remove(&chunk.turn_index);
            }
        }
        self.live -= 1;
        Ok(())
    }

    fn slot(&self, sequence: u64) -> Result<&Slot, ChunkError> {
        self.slots
            .get(sequence as usize)
            .ok_or_else(|| ChunkError::NotFound(format!("c{sequence}")))
    }

    fn live_slot(&self, sequence: u64) -> Result<&Slot, ChunkError> {
        let slot = self.slot(sequence)?;
        match slot.tombstone {
            None => Ok(slot),
            Some(t) => Err(ChunkError::Tombstoned {
                sequence,
                superseded_by: t.superseded_by,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChunkStoreOptions {
    /// fsync after every appended record.
    pub sync_writes: bool,
}

impl Default for ChunkStoreOptions {
    fn default() -> Self {
        Self { sync_writes: true }
    }
}

/// Append-only chunk store. Writes are serialized; reads run concurrently.
pub struct ChunkStore {
    state: RwLock<State>,
    log: Option<Mutex<RecordLog>>,
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
}

impl ChunkStore {
    /// A store with no backing log, for tests and ephemeral sessions.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            state: RwLock::new(State::default()),
            log: None,
            dir: None,
            clock,
        }
    }

    pub fn open(dir: &Path, opts: ChunkStoreOptions, clock: Arc<dyn Clock>) -> Result<Self, ChunkError> {
        fs::create_dir_all(dir)?;
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            let found = fs::read_to_string(&manifest)?;
            if found.trim() != LOG_FORMAT {
                return Err(ChunkError::FormatVersion(found.trim().to_string()));
            }
        } else {
            fs::write(&manifest, format!("{LOG_FORMAT}\n"))?;
        }

        let (log, recovered) = RecordLog::open(&dir.join(LOG_FILE), opts.sync_writes)?;
        let mut state = State::default();
        for (i, raw) in recovered.records.iter().enumerate() {
            let record: LogRecord =
                serde_json::from_slice(raw).map_err(|e| ChunkError::Corrupt(format!("record {i}: {e}")))?;
            state.apply(record)?;
        }
        tracing::debug!(
            dir = %dir.display(),
            chunks = state.slots.len(),
            live = state.live,
            truncated_bytes = recovered.truncated_bytes,
            "opened chunk store"
        );
        Ok(Self {
            state: RwLock::new(state),
            log: Some(Mutex::new(log)),
            dir: Some(dir.to_path_buf()),
            clock,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn append(&self, record: &LogRecord) -> Result<(), ChunkError> {
        if let Some(log) = &self.log {
            let bytes = serde_json::to_vec(record).expect("log records always serialize");
            log.lock().append(&bytes)?;
        }
        Ok(())
    }

    fn validate(new: &NewChunk) -> Result<(), ChunkError> {
        if new.content.trim().is_empty() {
            return Err(ChunkError::EmptyContent);
        }
        if new.media.iter().any(|m| m.uri.trim().is_empty()) {
            return Err(ChunkError::InvalidMedia);
        }
        Ok(())
    }

    pub fn put_chunk(&self, new: NewChunk) -> Result<ChunkId, ChunkError> {
        Self::validate(&new)?;
        let mut state = self.state.write();
        if state
            .sessions
            .get(&new.session_id)
            .is_some_and(|t| t.contains_key(&new.turn_index))
        {
            return Err(ChunkError::DuplicateTurn {
                session: new.session_id,
                turn: new.turn_index,
            });
        }
        let chunk = self.build(&state, new, None);
        let id = chunk.id.clone();
        let record = LogRecord::Put { chunk };
        self.append(&record)?;
        state.apply(record)?;
        Ok(id)
    }

    /// Appends a corrected copy of `old` and tombstones `old` in one record.
    /// The new chunk takes over the old chunk's session turn and media.
    pub fn supersede(&self, old: &ChunkId, content: String) -> Result<ChunkId, ChunkError> {
        let mut state = self.state.write();
        let prev = state.live_slot(old.sequence)?.chunk.clone();
        if prev.id != *old {
            return Err(ChunkError::NotFound(old.to_string()));
        }
        let new = NewChunk {
            content,
            session_id: prev.session_id.clone(),
            turn_index: prev.turn_index,
            media: prev.media.clone(),
            kind_hint: prev.kind_hint,
        };
        Self::validate(&new)?;
        let chunk = self.build(&state, new, Some(prev.id.clone()));
        let id = chunk.id.clone();
        let record = LogRecord::Put { chunk };
        self.append(&record)?;
        state.apply(record)?;
        Ok(id)
    }

    fn build(&self, state: &State, new: NewChunk, supersedes: Option<ChunkId>) -> Chunk {
        let digest = chunk_digest(&new.content, &new.session_id, &new.media);
        Chunk {
            id: ChunkId {
                sequence: state.slots.len() as u64,
                digest,
            },
            content: new.content,
            session_id: new.session_id,
            turn_index: new.turn_index,
            created_at: self.clock.now(),
            media: new.media,
            kind_hint: new.kind_hint,
            supersedes,
        }
    }

    pub fn get_chunk(&self, id: &ChunkId) -> Result<Arc<Chunk>, ChunkError> {
        let state = self.state.read();
        let slot = state.slot(id.sequence)?;
        if slot.chunk.id != *id {
            return Err(ChunkError::NotFound(id.to_string()));
        }
        let slot = state.live_slot(id.sequence)?;
        Ok(slot.chunk.clone())
    }

    pub fn get_by_sequence(&self, sequence: u64) -> Result<Arc<Chunk>, ChunkError> {
        Ok(self.state.read().live_slot(sequence)?.chunk.clone())
    }

    /// Resolves a sequence number to the full id, tombstoned or not.
    pub fn id_for(&self, sequence: u64) -> Option<ChunkId> {
        self.state
            .read()
            .slots
            .get(sequence as usize)
            .map(|s| s.chunk.id.clone())
    }

    pub fn is_live(&self, id: &ChunkId) -> bool {
        self.get_chunk(id).is_ok()
    }

    /// Marks `id` deleted and reports how many provenance entries in `refs`
    /// now point at a dead chunk. The caller is responsible for repairing them.
    pub fn tombstone(&self, id: &ChunkId, refs: &dyn ProvenanceIndex) -> Result<usize, ChunkError> {
        let mut state = self.state.write();
        match state.live_slot(id.sequence) {
            Ok(slot) if slot.chunk.id == *id => {}
            _ => return Err(ChunkError::NotFound(id.to_string())),
        }
        let record = LogRecord::Tombstone { sequence: id.sequence };
        self.append(&record)?;
        state.apply(record)?;
        Ok(refs.reference_count(id))
    }

    pub fn list_session(&self, session_id: &str) -> Vec<Arc<Chunk>> {
        let state = self.state.read();
        state
            .sessions
            .get(session_id)
            .map(|turns| {
                turns
                    .values()
                    .map(|&seq| state.slots[seq as usize].chunk.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// All live chunks in sequence order.
    pub fn live_chunks(&self) -> Vec<Arc<Chunk>> {
        self.state
            .read()
            .slots
            .iter()
            .filter(|s| s.tombstone.is_none())
            .map(|s| s.chunk.clone())
            .collect()
    }

    pub fn live_count(&self) -> usize {
        self.state.read().live
    }

    /// Total chunks ever written, tombstones included.
    pub fn total_count(&self) -> usize {
        self.state.read().slots.len()
    }

    pub fn tombstone_info(&self, sequence: u64) -> Option<Option<u64>> {
        self.state
            .read()
            .slots
            .get(sequence as usize)
            .and_then(|s| s.tombstone.map(|t| t.superseded_by))
    }

    pub fn flush(&self) -> Result<(), ChunkError> {
        if let Some(log) = &self.log {
            log.lock().flush()?;
        }
        Ok(())
    }
}

impl fmt::Debug for ChunkStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChunkStore")
            .field("dir", &self.dir)
            .field("chunks", &self.total_count())
            .field("live", &self.live_count())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn store() -> ChunkStore {
        ChunkStore::in_memory(Arc::new(ManualClock::new(Timestamp(1_700_000_000_000))))
    }

    /// Independent recomputation of the fingerprint construction.
    fn oracle_digest(content: &str, session: &str, uris: &[&str]) -> String {
        let mut bytes = Vec::new();
        for f in [content, session] {
            bytes.extend_from_slice(&(f.len() as u64).to_le_bytes());
            bytes.extend_from_slice(f.as_bytes());
        }
        let mut uris = uris.to_vec();
        uris.sort();
        bytes.extend_from_slice(&(uris.len() as u64).to_le_bytes());
        for u in uris {
            bytes.extend_from_slice(&(u.len() as u64).to_le_bytes());
            bytes.extend_from_slice(u.as_bytes());
        }
        hex::encode(Sha256::digest(&bytes))
    }

    #[test]
    fn put_returns_sequence_zero_and_recomputable_digest() {
        let s = store();
        let id = s
            .put_chunk(NewChunk::text("Alice adopted a cat named Milo", "s1", 0))
            .unwrap();
        assert_eq!(id.sequence, 0);
        assert_eq!(id.digest, oracle_digest("Alice adopted a cat named Milo", "s1", &[]));
        assert_eq!(id.digest.len(), 64);
    }

    #[test]
    fn digest_ignores_media_order() {
        let a = MediaRef::new("file:///a.jpg", Modality::Image);
        let b = MediaRef::new("file:///b.jpg", Modality::Image);
        assert_eq!(
            chunk_digest("x", "s", &[a.clone(), b.clone()]),
            chunk_digest("x", "s", &[b, a])
        );
        assert_eq!(
            chunk_digest("x", "s", &[MediaRef::new("file:///a.jpg", Modality::Image)]),
            oracle_digest("x", "s", &["file:///a.jpg"])
        );
    }

    #[test]
    fn empty_content_rejected() {
        let s = store();
        assert!(matches!(
            s.put_chunk(NewChunk::text("", "s1", 1)),
            Err(ChunkError::EmptyContent)
        ));
        assert!(matches!(
            s.put_chunk(NewChunk::text(" \n\t ", "s1", 1)),
            Err(ChunkError::EmptyContent)
        ));
    }

    #[test]
    fn sequences_are_monotone_and_turns_unique() {
        let s = store();
        let a = s.put_chunk(NewChunk::text("first", "s1", 0)).unwrap();
        let b = s.put_chunk(NewChunk::text("second", "s1", 1)).unwrap();
        assert_eq!((a.sequence, b.sequence), (0, 1));
        assert!(matches!(
            s.put_chunk(NewChunk::text("again", "s1", 1)),
            Err(ChunkError::DuplicateTurn { turn: 1, .. })
        ));
        // same turn in another session is fine
        s.put_chunk(NewChunk::text("other", "s2", 1)).unwrap();
    }

    #[test]
    fn get_round_trips_and_distinguishes_missing_from_deleted() {
        let s = store();
        let content = "naïve café \u{1F408} bytes";
        let id = s.put_chunk(NewChunk::text(content, "s1", 0)).unwrap();
        assert_eq!(s.get_chunk(&id).unwrap().content.as_bytes(), content.as_bytes());

        let bogus = ChunkId {
            sequence: 42,
            digest: "00".into(),
        };
        assert!(matches!(s.get_chunk(&bogus), Err(ChunkError::NotFound(_))));

        assert_eq!(s.tombstone(&id, &NoReferences).unwrap(), 0);
        assert!(matches!(
            s.get_chunk(&id),
            Err(ChunkError::Tombstoned {
                sequence: 0,
                superseded_by: None
            })
        ));
        assert!(matches!(s.tombstone(&id, &NoReferences), Err(ChunkError::NotFound(_))));
    }

    #[test]
    fn digest_mismatch_is_not_found() {
        let s = store();
        let mut id = s.put_chunk(NewChunk::text("hello", "s1", 0)).unwrap();
        id.digest = "deadbeef".into();
        assert!(matches!(s.get_chunk(&id), Err(ChunkError::NotFound(_))));
    }

    #[test]
    fn list_session_sorts_by_turn_and_skips_tombstones() {
        let s = store();
        assert!(s.list_session("nope").is_empty());
        let t2 = s.put_chunk(NewChunk::text("two", "s", 2)).unwrap();
        s.put_chunk(NewChunk::text("zero", "s", 0)).unwrap();
        s.put_chunk(NewChunk::text("one", "s", 1)).unwrap();
        let turns: Vec<u64> = s.list_session("s").iter().map(|c| c.turn_index).collect();
        assert_eq!(turns, vec![0, 1, 2]);

        s.tombstone(&t2, &NoReferences).unwrap();
        let all = s.list_session("s");
        let expected: Vec<u64> = [0u64, 1, 2].into_iter().filter(|&t| t != 2).collect();
        assert_eq!(all.iter().map(|c| c.turn_index).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn supersede_tombstones_old_and_keeps_turn() {
        let s = store();
        let old = s.put_chunk(NewChunk::text("Milo is a dog", "s", 0)).unwrap();
        let new = s.supersede(&old, "Milo is a cat".into()).unwrap();
        assert_eq!(new.sequence, 1);
        assert!(matches!(
            s.get_chunk(&old),
            Err(ChunkError::Tombstoned {
                superseded_by: Some(1),
                ..
            })
        ));
        let c = s.get_chunk(&new).unwrap();
        assert_eq!(c.supersedes.as_ref(), Some(&old));
        assert_eq!(c.turn_index, 0);
        assert_eq!(s.list_session("s").len(), 1);
    }

    #[test]
    fn reopen_recovers_everything() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(Timestamp(5)));
        let ids = {
            let s = ChunkStore::open(dir.path(), ChunkStoreOptions::default(), clock.clone()).unwrap();
            let a = s.put_chunk(NewChunk::text("a", "s", 0)).unwrap();
            let b = s
                .put_chunk(
                    NewChunk::text("b", "s", 1).with_media(vec![MediaRef::new("file:///x.png", Modality::Image)]),
                )
                .unwrap();
            s.tombstone(&a, &NoReferences).unwrap();
            let c = s.supersede(&b, "b2".into()).unwrap();
            (a, b, c)
        };
        let s = ChunkStore::open(dir.path(), ChunkStoreOptions::default(), clock).unwrap();
        assert!(matches!(s.get_chunk(&ids.0), Err(ChunkError::Tombstoned { .. })));
        assert!(matches!(s.get_chunk(&ids.1), Err(ChunkError::Tombstoned { .. })));
        let c = s.get_chunk(&ids.2).unwrap();
        assert_eq!(c.content, "b2");
        assert_eq!(c.media.len(), 1);
        assert_eq!(s.live_count(), 1);
        assert_eq!(
            fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap().trim(),
            LOG_FORMAT
        );
    }

    #[test]
    fn wrong_manifest_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "memverse-chunklog/99\n").unwrap();
        let err = ChunkStore::open(
            dir.path(),
            ChunkStoreOptions::default(),
            Arc::new(ManualClock::default()),
        )
        .unwrap_err();
        assert!(matches!(err, ChunkError::FormatVersion(_)));
    }
}
