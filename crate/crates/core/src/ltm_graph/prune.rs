//! Budgeted forgetting.
//!
//! Elements are ranked by recency-decayed salience,
//! `salience * exp(-lambda * days_since_last_activation)`, and the lowest
//! ranked unprotected ones are dropped until the graph fits the budget. An
//! element is protected if any of its kinds is protected; an entity is also
//! protected while a protected relation depends on it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::kind::MemoryKind;

use super::{EntityId, GraphError, LtmGraph, RelationId};

const MS_PER_DAY: f64 = 86_400_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneBudget {
    pub max_entities: usize,
    pub max_relations: usize,
    /// Unprotected elements scoring below this are dropped even when under budget.
    pub min_salience: f64,
    pub protected_kinds: BTreeSet<MemoryKind>,
}

impl Default for PruneBudget {
    fn default() -> Self {
        Self {
            max_entities: 10_000,
            max_relations: 50_000,
            min_salience: 0.0,
            protected_kinds: [MemoryKind::Core].into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneReport {
    pub removed_entities: Vec<EntityId>,
    pub removed_relations: Vec<RelationId>,
}

impl PruneReport {
    pub fn is_empty(&self) -> bool {
        self.removed_entities.is_empty() && self.removed_relations.is_empty()
    }
}

pub fn retention_score(salience: f64, last_activated: Timestamp, now: Timestamp, lambda_per_day: f64) -> f64 {
    let age_days = (now.0 - last_activated.0).max(0) as f64 / MS_PER_DAY;
    salience * (-lambda_per_day * age_days).exp()
}

/// Number of items to cut from the front of an ascending-score list.
fn cut_len(scores: &[f64], min_score: f64, excess: usize) -> usize {
    let below = scores.iter().take_while(|&&s| s < min_score).count();
    below.max(excess).min(scores.len())
}

impl LtmGraph {
    pub fn prune(&mut self, policy: &PruneBudget, now: Timestamp) -> Result<PruneReport, GraphError> {
        if policy.max_entities == 0 || policy.max_relations == 0 {
            return Err(GraphError::InvalidBudget("budgets must be positive".into()));
        }
        let lambda = self.config.decay_lambda_per_day;
        let is_protected = |kinds: &BTreeSet<MemoryKind>| !kinds.is_disjoint(&policy.protected_kinds);

        let protected_relations: BTreeSet<RelationId> = self
            .relations
            .values()
            .filter(|r| is_protected(&r.kinds))
            .map(|r| r.id)
            .collect();
        let mut protected_entities: BTreeSet<EntityId> = self
            .entities
            .values()
            .filter(|e| is_protected(&e.kinds))
            .map(|e| e.id)
            .collect();
        for rid in &protected_relations {
            let r = &self.relations[rid];
            protected_entities.insert(r.src);
            protected_entities.insert(r.dst);
        }
        if protected_entities.len() > policy.max_entities {
            return Err(GraphError::BudgetInfeasible {
                what: "entities",
                protected: protected_entities.len(),
                budget: policy.max_entities,
            });
        }
        if protected_relations.len() > policy.max_relations {
            return Err(GraphError::BudgetInfeasible {
                what: "relations",
                protected: protected_relations.len(),
                budget: policy.max_relations,
            });
        }

        // plan entities
        let mut candidates: Vec<(f64, EntityId)> = self
            .entities
            .values()
            .filter(|e| !protected_entities.contains(&e.id))
            .map(|e| (retention_score(e.salience, e.last_activated, now, lambda), e.id))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let excess = self.entities.len().saturating_sub(policy.max_entities);
        let scores: Vec<f64> = candidates.iter().map(|c| c.0).collect();
        let n = cut_len(&scores, policy.min_salience, excess);
        let drop_entities: BTreeSet<EntityId> = candidates[..n].iter().map(|c| c.1).collect();

        // plan relations among survivors
        let cascaded: BTreeSet<RelationId> = self
            .relations
            .values()
            .filter(|r| drop_entities.contains(&r.src) || drop_entities.contains(&r.dst))
            .map(|r| r.id)
            .collect();
        let remaining = self.relations.len() - cascaded.len();
        let mut rel_candidates: Vec<(f64, RelationId)> = self
            .relations
            .values()
            .filter(|r| !cascaded.contains(&r.id) && !protected_relations.contains(&r.id))
            .map(|r| (retention_score(r.salience, r.last_activated, now, lambda), r.id))
            .collect();
        rel_candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let scores: Vec<f64> = rel_candidates.iter().map(|c| c.0).collect();
        let n = cut_len(
            &scores,
            policy.min_salience,
            remaining.saturating_sub(policy.max_relations),
        );
        let drop_relations: Vec<RelationId> = rel_candidates[..n].iter().map(|c| c.1).collect();

        let mut report = PruneReport::default();
        for rid in drop_relations {
            self.remove_relation(rid);
            report.removed_relations.push(rid);
        }
        for eid in drop_entities {
            report.removed_relations.extend(self.remove_entity_inner(eid));
            report.removed_entities.push(eid);
        }
        report.removed_relations.sort();
        report.removed_relations.dedup();
        if !report.is_empty() {
            tracing::debug!(
                entities = report.removed_entities.len(),
                relations = report.removed_relations.len(),
                "pruned graph"
            );
        }
        Ok(report)
    }
}
