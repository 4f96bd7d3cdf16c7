//! Long-term memory graph.
//!
//! One entity namespace is shared by the core, episodic and semantic
//! subgraphs; each entity and relation records the set of kinds it belongs
//! to, so the per-kind view of a subgraph is just a filter. Every element
//! keeps a non-empty provenance set of chunk ids, and removing the last
//! supporting chunk removes the element.

mod prune;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk_store::{Chunk, ChunkError, ChunkId, ChunkStore, MediaRef, ProvenanceIndex};
use crate::clock::Timestamp;
use crate::extractor::ExtractionResult;
use crate::kind::MemoryKind;

pub use prune::{retention_score, PruneBudget, PruneReport};
pub use snapshot::GRAPH_FORMAT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u64);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementId {
    Entity(EntityId),
    Relation(RelationId),
}

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementId::Entity(e) => e.fmt(f),
            ElementId::Relation(r) => r.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub canonical_name: String,
    pub display_name: String,
    pub etype: String,
    pub kinds: BTreeSet<MemoryKind>,
    pub provenance: BTreeSet<ChunkId>,
    pub salience: f64,
    pub last_activated: Timestamp,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub src: EntityId,
    pub dst: EntityId,
    pub label: String,
    pub kinds: BTreeSet<MemoryKind>,
    pub provenance: BTreeSet<ChunkId>,
    pub salience: f64,
    pub last_activated: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphDelta {
    pub entities_added: usize,
    pub entities_updated: usize,
    pub relations_added: usize,
    pub relations_updated: usize,
    /// Provenance entries that were not already present.
    pub provenance_added: usize,
}

/// The original chunks (and their media) behind one graph element.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub seed: ElementId,
    /// Ordered by chunk sequence.
    pub chunks: Vec<Arc<Chunk>>,
    /// Union of the chunks' media, first occurrence order.
    pub media: Vec<MediaRef>,
    /// Provenance entries that no longer resolve; reported, never fabricated.
    pub repair: Vec<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Subgraph {
    /// (entity, hop distance) ordered by (distance, id).
    pub entities: Vec<(EntityId, u32)>,
    /// Ordered by id.
    pub relations: Vec<RelationId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KindStats {
    pub entity_count: usize,
    pub relation_count: usize,
    pub chunk_ref_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphStats {
    pub entity_count: usize,
    pub relation_count: usize,
    pub chunk_ref_count: usize,
    pub per_kind: BTreeMap<MemoryKind, KindStats>,
    pub total_bytes_estimate: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RepairReport {
    pub provenance_dropped: usize,
    pub removed_entities: Vec<EntityId>,
    pub removed_relations: Vec<RelationId>,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{0} not found")]
    NotFound(ElementId),
    #[error("chunk {0} is missing or deleted")]
    DanglingChunk(ChunkId),
    #[error("invalid extraction result: {0}")]
    InvalidExtraction(String),
    #[error("hop limit must be at least 1")]
    InvalidHopLimit,
    #[error("invalid prune budget: {0}")]
    InvalidBudget(String),
    #[error("{protected} protected {what} exceed the budget of {budget}")]
    BudgetInfeasible {
        what: &'static str,
        protected: usize,
        budget: usize,
    },
    #[error("unsupported graph snapshot format `{0}`")]
    FormatVersionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub activation_bonus: f64,
    pub decay_lambda_per_day: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            activation_bonus: 1.0,
            decay_lambda_per_day: 1.0 / 30.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LtmGraph {
    entities: BTreeMap<EntityId, Entity>,
    relations: BTreeMap<RelationId, Relation>,
    next_entity: u64,
    next_relation: u64,
    config: GraphConfig,

    by_name: HashMap<String, EntityId>,
    by_triple: HashMap<(EntityId, EntityId, String), RelationId>,
    incident: HashMap<EntityId, BTreeSet<RelationId>>,
    chunk_refs: HashMap<ChunkId, (BTreeSet<EntityId>, BTreeSet<RelationId>)>,
    /// Bumped whenever the entity set changes; retrieval indexes compare against it.
    generation: u64,
}

/// Structural equality: ids, names, provenance, salience and timestamps.
impl PartialEq for LtmGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.next_entity == other.next_entity
            && self.next_relation == other.next_relation
    }
}

impl LtmGraph {
    pub fn new(config: GraphConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entities.get(&id)
    }

    pub fn relation(&self, id: RelationId) -> Option<&Relation> {
        self.relations.get(&id)
    }

    pub fn entity_by_name(&self, name: &str) -> Option<&Entity> {
        let key = crate::text::canonical_key(name);
        self.by_name.get(&key).and_then(|id| self.entities.get(id))
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn provenance(&self, el: ElementId) -> Option<&BTreeSet<ChunkId>> {
        match el {
            ElementId::Entity(id) => self.entities.get(&id).map(|e| &e.provenance),
            ElementId::Relation(id) => self.relations.get(&id).map(|r| &r.provenance),
        }
    }

    /// Entities of one kind. Episodic entries are time ordered by their
    /// earliest supporting chunk; the others by id.
    pub fn view(&self, kind: MemoryKind) -> Vec<EntityId> {
        let mut ids: Vec<&Entity> = self.entities.values().filter(|e| e.kinds.contains(&kind)).collect();
        if kind == MemoryKind::Episodic {
            ids.sort_by_key(|e| (e.provenance.first().map(|c| c.sequence), e.id));
        }
        ids.into_iter().map(|e| e.id).collect()
    }

    /// Upserts an extraction result. Rejected as a whole if any cited chunk is not live.
    pub fn merge_extraction(
        &mut self,
        result: &ExtractionResult,
        store: &ChunkStore,
        now: Timestamp,
    ) -> Result<GraphDelta, GraphError> {
        let cited: BTreeSet<ChunkId> = result
            .entities
            .iter()
            .flat_map(|e| e.source_chunks.iter())
            .chain(result.relations.iter().flat_map(|r| r.source_chunks.iter()))
            .cloned()
            .collect();
        result
            .check_invariants(&cited)
            .map_err(|e| GraphError::InvalidExtraction(e.to_string()))?;
        if let Some(dead) = cited.iter().find(|c| !store.is_live(c)) {
            return Err(GraphError::DanglingChunk(dead.clone()));
        }

        let mut delta = GraphDelta::default();
        for ex in &result.entities {
            match self.by_name.get(&ex.name).copied() {
                None => {
                    let id = EntityId(self.next_entity);
                    self.next_entity += 1;
                    for c in &ex.source_chunks {
                        self.chunk_refs.entry(c.clone()).or_default().0.insert(id);
                    }
                    self.entities.insert(
                        id,
                        Entity {
                            id,
                            canonical_name: ex.name.clone(),
                            display_name: ex.display_name.clone(),
                            etype: ex.etype.clone(),
                            kinds: ex.kinds.clone(),
                            provenance: ex.source_chunks.clone(),
                            salience: ex.source_chunks.len() as f64,
                            last_activated: now,
                            created_at: now,
                        },
                    );
                    self.by_name.insert(ex.name.clone(), id);
                    delta.entities_added += 1;
                    delta.provenance_added += ex.source_chunks.len();
                    self.generation += 1;
                }
                Some(id) => {
                    let e = self.entities.get_mut(&id).expect("index consistent");
                    let mut changed = false;
                    for c in &ex.source_chunks {
                        if e.provenance.insert(c.clone()) {
                            self.chunk_refs.entry(c.clone()).or_default().0.insert(id);
                            e.salience += 1.0;
                            delta.provenance_added += 1;
                            changed = true;
                        }
                    }
                    for k in &ex.kinds {
                        changed |= e.kinds.insert(*k);
                    }
                    if e.etype == crate::extractor::UNKNOWN_TYPE && ex.etype != e.etype {
                        e.etype = ex.etype.clone();
                        changed = true;
                    }
                    if changed {
                        delta.entities_updated += 1;
                    }
                }
            }
        }

        for ex in &result.relations {
            let src = self.by_name[&ex.src_name];
            let dst = self.by_name[&ex.dst_name];
            let key = (src, dst, ex.label.clone());
            match self.by_triple.get(&key).copied() {
                None => {
                    let id = RelationId(self.next_relation);
                    self.next_relation += 1;
                    for c in &ex.source_chunks {
                        self.chunk_refs.entry(c.clone()).or_default().1.insert(id);
                    }
                    self.relations.insert(
                        id,
                        Relation {
                            id,
                            src,
                            dst,
                            label: ex.label.clone(),
                            kinds: ex.kinds.clone(),
                            provenance: ex.source_chunks.clone(),
                            salience: ex.source_chunks.len() as f64,
                            last_activated: now,
                        },
                    );
                    self.by_triple.insert(key, id);
                    self.incident.entry(src).or_default().insert(id);
                    self.incident.entry(dst).or_default().insert(id);
                    delta.relations_added += 1;
                    delta.provenance_added += ex.source_chunks.len();
                }
                Some(id) => {
                    let r = self.relations.get_mut(&id).expect("index consistent");
                    let mut changed = false;
                    for c in &ex.source_chunks {
                        if r.provenance.insert(c.clone()) {
                            self.chunk_refs.entry(c.clone()).or_default().1.insert(id);
                            r.salience += 1.0;
                            delta.provenance_added += 1;
                            changed = true;
                        }
                    }
                    for k in &ex.kinds {
                        changed |= r.kinds.insert(*k);
                    }
                    if changed {
                        delta.relations_updated += 1;
                    }
                }
            }
        }
        Ok(delta)
    }

    /// Gathers the chunks and media behind `seed` without touching salience.
    pub fn resolve(&self, seed: ElementId, store: &ChunkStore) -> Result<Activation, GraphError> {
        let prov = self.provenance(seed).ok_or(GraphError::NotFound(seed))?;
        let mut chunks = Vec::with_capacity(prov.len());
        let mut repair = Vec::new();
        for id in prov {
            match store.get_chunk(id) {
                Ok(c) => chunks.push(c),
                Err(ChunkError::NotFound(_) | ChunkError::Tombstoned { .. }) => repair.push(id.clone()),
                Err(e) => return Err(GraphError::Io(std::io::Error::other(e.to_string()))),
            }
        }
        let media = union_media(&chunks);
        Ok(Activation {
            seed,
            chunks,
            media,
            repair,
        })
    }

    /// Resolves `seed` and records the use: salience gains the activation
    /// bonus and `last_activated` moves to `now`.
    pub fn activate(&mut self, seed: ElementId, store: &ChunkStore, now: Timestamp) -> Result<Activation, GraphError> {
        let act = self.resolve(seed, store)?;
        self.touch(&[seed], now);
        Ok(act)
    }

    /// Applies the activation bonus to each existing element in `seeds`.
    pub fn touch(&mut self, seeds: &[ElementId], now: Timestamp) {
        let bonus = self.config.activation_bonus;
        for seed in seeds {
            match seed {
                ElementId::Entity(id) => {
                    if let Some(e) = self.entities.get_mut(id) {
                        e.salience += bonus;
                        e.last_activated = now;
                    }
                }
                ElementId::Relation(id) => {
                    if let Some(r) = self.relations.get_mut(id) {
                        r.salience += bonus;
                        r.last_activated = now;
                    }
                }
            }
        }
    }

    /// Breadth-first neighbourhood of `seed`, following relations in either
    /// direction whose kinds intersect `kinds`. Relations examined from an
    /// entity closer than `hop_limit` are included.
    pub fn neighbors(
        &self,
        seed: EntityId,
        hop_limit: u32,
        kinds: &BTreeSet<MemoryKind>,
    ) -> Result<Subgraph, GraphError> {
        if hop_limit == 0 {
            return Err(GraphError::InvalidHopLimit);
        }
        if !self.entities.contains_key(&seed) {
            return Err(GraphError::NotFound(ElementId::Entity(seed)));
        }
        let mut dist: BTreeMap<EntityId, u32> = BTreeMap::new();
        let mut rels: BTreeSet<RelationId> = BTreeSet::new();
        let mut queue = VecDeque::from([seed]);
        dist.insert(seed, 0);
        while let Some(at) = queue.pop_front() {
            let d = dist[&at];
            if d >= hop_limit {
                continue;
            }
            let Some(edges) = self.incident.get(&at) else { continue };
            let mut next = Vec::new();
            for rid in edges {
                let r = &self.relations[rid];
                if r.kinds.is_disjoint(kinds) {
                    continue;
                }
                rels.insert(*rid);
                let other = if r.src == at { r.dst } else { r.src };
                if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(other) {
                    slot.insert(d + 1);
                    next.push(other);
                }
            }
            next.sort();
            queue.extend(next);
        }
        let mut entities: Vec<(EntityId, u32)> = dist.into_iter().collect();
        entities.sort_by_key(|&(id, d)| (d, id));
        Ok(Subgraph {
            entities,
            relations: rels.into_iter().collect(),
        })
    }

    pub fn stats(&self) -> GraphStats {
        let mut s = GraphStats {
            entity_count: self.entities.len(),
            relation_count: self.relations.len(),
            ..Default::default()
        };
        for k in MemoryKind::ALL {
            s.per_kind.insert(k, KindStats::default());
        }
        let mut bytes = 0usize;
        for e in self.entities.values() {
            s.chunk_ref_count += e.provenance.len();
            for k in &e.kinds {
                let ks = s.per_kind.get_mut(k).unwrap();
                ks.entity_count += 1;
                ks.chunk_ref_count += e.provenance.len();
            }
            bytes += 64 + e.canonical_name.len() + e.display_name.len() + e.etype.len() + 72 * e.provenance.len();
        }
        for r in self.relations.values() {
            s.chunk_ref_count += r.provenance.len();
            for k in &r.kinds {
                let ks = s.per_kind.get_mut(k).unwrap();
                ks.relation_count += 1;
                ks.chunk_ref_count += r.provenance.len();
            }
            bytes += 64 + r.label.len() + 72 * r.provenance.len();
        }
        s.total_bytes_estimate = bytes;
        s
    }

    /// Drops every provenance entry pointing at `chunk`; elements left with
    /// no provenance are removed, together with relations incident to
    /// removed entities.
    pub fn repair_chunk(&mut self, chunk: &ChunkId) -> RepairReport {
        let mut report = RepairReport::default();
        let Some((ents, rels)) = self.chunk_refs.remove(chunk) else {
            return report;
        };
        for rid in rels {
            if let Some(r) = self.relations.get_mut(&rid) {
                if r.provenance.remove(chunk) {
                    report.provenance_dropped += 1;
                }
                if r.provenance.is_empty() {
                    self.remove_relation(rid);
                    report.removed_relations.push(rid);
                }
            }
        }
        for eid in ents {
            if let Some(e) = self.entities.get_mut(&eid) {
                if e.provenance.remove(chunk) {
                    report.provenance_dropped += 1;
                }
                if e.provenance.is_empty() {
                    report.removed_relations.extend(self.remove_entity_inner(eid));
                    report.removed_entities.push(eid);
                }
            }
        }
        report.removed_relations.sort();
        report.removed_relations.dedup();
        report
    }

    /// Removes an entity and every relation touching it.
    pub fn remove_entity(&mut self, id: EntityId) -> Result<RepairReport, GraphError> {
        if !self.entities.contains_key(&id) {
            return Err(GraphError::NotFound(ElementId::Entity(id)));
        }
        let removed_relations = self.remove_entity_inner(id);
        Ok(RepairReport {
            provenance_dropped: 0,
            removed_entities: vec![id],
            removed_relations,
        })
    }

    fn remove_entity_inner(&mut self, id: EntityId) -> Vec<RelationId> {
        let incident: Vec<RelationId> = self
            .incident
            .get(&id)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for rid in &incident {
            self.remove_relation(*rid);
        }
        self.incident.remove(&id);
        if let Some(e) = self.entities.remove(&id) {
            self.by_name.remove(&e.canonical_name);
            for c in &e.provenance {
                if let Some(refs) = self.chunk_refs.get_mut(c) {
                    refs.0.remove(&id);
                    if refs.0.is_empty() && refs.1.is_empty() {
                        self.chunk_refs.remove(c);
                    }
                }
            }
            self.generation += 1;
        }
        incident
    }

    fn remove_relation(&mut self, id: RelationId) {
        let Some(r) = self.relations.remove(&id) else { return };
        self.by_triple.remove(&(r.src, r.dst, r.label.clone()));
        for end in [r.src, r.dst] {
            if let Some(s) = self.incident.get_mut(&end) {
                s.remove(&id);
            }
        }
        for c in &r.provenance {
            if let Some(refs) = self.chunk_refs.get_mut(c) {
                refs.1.remove(&id);
                if refs.0.is_empty() && refs.1.is_empty() {
                    self.chunk_refs.remove(c);
                }
            }
        }
    }

    /// Rebuilds every derived index from the entity and relation tables.
    fn reindex(&mut self) {
        self.by_name.clear();
        self.by_triple.clear();
        self.incident.clear();
        self.chunk_refs.clear();
        for e in self.entities.values() {
            self.by_name.insert(e.canonical_name.clone(), e.id);
            for c in &e.provenance {
                self.chunk_refs.entry(c.clone()).or_default().0.insert(e.id);
            }
        }
        for r in self.relations.values() {
            self.by_triple.insert((r.src, r.dst, r.label.clone()), r.id);
            self.incident.entry(r.src).or_default().insert(r.id);
            self.incident.entry(r.dst).or_default().insert(r.id);
            for c in &r.provenance {
                self.chunk_refs.entry(c.clone()).or_default().1.insert(r.id);
            }
        }
        self.generation += 1;
    }
}

impl ProvenanceIndex for LtmGraph {
    fn reference_count(&self, chunk: &ChunkId) -> usize {
        self.chunk_refs.get(chunk).map(|(e, r)| e.len() + r.len()).unwrap_or(0)
    }
}

pub(crate) fn union_media(chunks: &[Arc<Chunk>]) -> Vec<MediaRef> {
    let mut seen = BTreeSet::new();
    let mut media = Vec::new();
    for c in chunks {
        for m in &c.media {
            if seen.insert((m.uri.clone(), m.modality)) {
                media.push(m.clone());
            }
        }
    }
    media
}

#[cfg(test)]
mod tests;
