//! Query-time pipeline over the long-term graph.
//!
//! A query is matched against entity names by a fusion of keyword overlap and
//! embedding cosine, each match is expanded breadth-first, and the chunks
//! behind the resulting neighbourhood are ranked and packed into a bounded
//! context. Retrieval never mutates the graph; callers that want activation
//! bookkeeping apply [`RetrievalResult::activated`] through `LtmGraph::touch`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk_store::{Chunk, ChunkError, ChunkId, ChunkStore, MediaRef};
use crate::kind::MemoryKind;
use crate::ltm_graph::{ElementId, EntityId, LtmGraph, Subgraph};
use crate::text::tokens;

pub const DEFAULT_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity; zero whenever either vector has zero norm.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (self.norm * other.norm)
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

/// Each token is hashed into this many signed buckets, so that single-bucket
/// collisions between short names do not make them indistinguishable.
const HASH_PROBES: u8 = 4;

/// Signed feature hashing of lowercase tokens, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// MurmurHash3 finalizer; spreads FNV's weakly mixed low bits across the word.
fn fmix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^ (h >> 33)
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim];
        for t in tokens(text) {
            let mut bytes = t.into_bytes();
            bytes.push(0);
            for probe in 0..HASH_PROBES {
                *bytes.last_mut().expect("probe byte") = probe;
                let h = fmix64(fnv1a(&bytes));
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                v[(h % self.dim as u64) as usize] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector::new(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Entity matches scoring below this are discarded.
    pub min_score: f64,
    pub context_separator: String,
    pub rewrite_separator: String,
    pub core_bonus: f64,
    pub semantic_bonus: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            min_score: 0.3,
            context_separator: "\n---\n".into(),
            rewrite_separator: "||".into(),
            core_bonus: 0.1,
            semantic_bonus: 0.05,
        }
    }
}

impl RetrievalConfig {
    fn kind_bonus(&self, kind: MemoryKind) -> f64 {
        match kind {
            MemoryKind::Core => self.core_bonus,
            MemoryKind::Semantic => self.semantic_bonus,
            MemoryKind::Episodic => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub top_m: usize,
    pub hop_limit: u32,
    /// Maximum context length in characters.
    pub context_budget: usize,
    pub kinds: BTreeSet<MemoryKind>,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            top_m: 5,
            hop_limit: 2,
            context_budget: 2000,
            kinds: MemoryKind::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub entity: EntityId,
    pub name: String,
    pub score: f64,
    pub lexical: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: ChunkId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub matched_entities: Vec<ScoredEntity>,
    pub subgraph: Subgraph,
    /// Score descending; equal scores put the newer chunk first.
    pub chunks: Vec<ScoredChunk>,
    pub media: Vec<MediaRef>,
    pub context: String,
    /// Chunk reads performed.
    pub accesses: usize,
}

impl RetrievalResult {
    pub fn empty(query: &str) -> Self {
        Self {
            query: query.to_string(),
            matched_entities: Vec::new(),
            subgraph: Subgraph::default(),
            chunks: Vec::new(),
            media: Vec::new(),
            context: String::new(),
            accesses: 0,
        }
    }

    /// Every element of the expanded neighbourhood.
    pub fn activated(&self) -> Vec<ElementId> {
        self.subgraph
            .entities
            .iter()
            .map(|(e, _)| ElementId::Entity(*e))
            .chain(self.subgraph.relations.iter().map(|r| ElementId::Relation(*r)))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("entity index is stale (built at generation {index}, graph at {graph})")]
    IndexStale { index: u64, graph: u64 },
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
    #[error("chunk store: {0}")]
    Store(#[from] ChunkError),
}

struct IndexEntry {
    id: EntityId,
    name_tokens: BTreeSet<String>,
    embedding: EmbeddingVector,
}

/// Exact-scan entity index plus the scoring configuration.
pub struct Retriever {
    config: RetrievalConfig,
    embedder: Arc<dyn Embedder>,
    generation: u64,
    entries: Vec<IndexEntry>,
}

impl Retriever {
    pub fn new(config: RetrievalConfig) -> Self {
        Self::with_embedder(config, Arc::new(HashEmbedder::default()))
    }

    pub fn with_embedder(config: RetrievalConfig, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            config,
            embedder,
            generation: 0,
            entries: Vec::new(),
        }
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        self.embedder.embed(text)
    }

    /// Re-embeds every entity name in the graph.
    pub fn rebuild(&mut self, graph: &LtmGraph) {
        self.entries = graph
            .entities()
            .map(|e| IndexEntry {
                id: e.id,
                name_tokens: tokens(&e.canonical_name).into_iter().collect(),
                embedding: self.embedder.embed(&e.canonical_name),
            })
            .collect();
        self.generation = graph.generation();
    }

    pub fn is_current(&self, graph: &LtmGraph) -> bool {
        self.generation == graph.generation() && self.entries.len() == graph.entity_count()
    }

    fn check_current(&self, graph: &LtmGraph) -> Result<(), RetrievalError> {
        if self.is_current(graph) {
            Ok(())
        } else {
            Err(RetrievalError::IndexStale {
                index: self.generation,
                graph: graph.generation(),
            })
        }
    }

    pub fn match_entities(
        &self,
        graph: &LtmGraph,
        query: &str,
        top_m: usize,
    ) -> Result<Vec<ScoredEntity>, RetrievalError> {
        self.match_filtered(graph, query, top_m, &MemoryKind::all())
    }

    fn match_filtered(
        &self,
        graph: &LtmGraph,
        query: &str,
        top_m: usize,
        kinds: &BTreeSet<MemoryKind>,
    ) -> Result<Vec<ScoredEntity>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        self.check_current(graph)?;
        let q_tokens: BTreeSet<String> = tokens(query).into_iter().collect();
        let q_vec = self.embedder.embed(query);
        let mut scored = Vec::new();
        for entry in &self.entries {
            let Some(entity) = graph.entity(entry.id) else { continue };
            if entity.kinds.is_disjoint(kinds) {
                continue;
            }
            let lexical = if entry.name_tokens.is_empty() {
                0.0
            } else {
                entry.name_tokens.intersection(&q_tokens).count() as f64 / entry.name_tokens.len() as f64
            };
            let cosine = q_vec.cosine(&entry.embedding);
            let score = self.config.alpha * lexical + self.config.beta * cosine;
            if score >= self.config.min_score && score > 0.0 {
                scored.push(ScoredEntity {
                    entity: entry.id,
                    name: entity.display_name.clone(),
                    score,
                    lexical,
                    cosine,
                });
            }
        }
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entity.cmp(&b.entity)));
        scored.truncate(top_m);
        Ok(scored)
    }

    pub fn retrieve(
        &self,
        graph: &LtmGraph,
        store: &ChunkStore,
        query: &str,
        params: &RetrievalParams,
    ) -> Result<RetrievalResult, RetrievalError> {
        if params.top_m == 0 || params.hop_limit == 0 {
            return Err(RetrievalError::InvalidParams(
                "top_m and hop_limit must be positive".into(),
            ));
        }
        let matched = self.match_filtered(graph, query, params.top_m, &params.kinds)?;
        if matched.is_empty() {
            return Ok(RetrievalResult::empty(query));
        }

        // Each seed spreads its score over its neighbourhood, attenuated by hop distance.
        let mut weight: BTreeMap<EntityId, f64> = BTreeMap::new();
        let mut dist: BTreeMap<EntityId, u32> = BTreeMap::new();
        let mut relations = BTreeSet::new();
        for seed in &matched {
            let sub = graph
                .neighbors(seed.entity, params.hop_limit, &params.kinds)
                .expect("matched entities exist in the graph");
            for (e, d) in sub.entities {
                *weight.entry(e).or_default() += seed.score / f64::from(1 + d);
                let slot = dist.entry(e).or_insert(d);
                *slot = (*slot).min(d);
            }
            relations.extend(sub.relations);
        }
        let mut sub_entities: Vec<(EntityId, u32)> = dist.into_iter().collect();
        sub_entities.sort_by_key(|&(id, d)| (d, id));
        let subgraph = Subgraph {
            entities: sub_entities,
            relations: relations.into_iter().collect(),
        };

        let mut chunk_score: BTreeMap<ChunkId, f64> = BTreeMap::new();
        for (eid, w) in &weight {
            let e = graph.entity(*eid).expect("subgraph entity exists");
            for c in &e.provenance {
                *chunk_score.entry(c.clone()).or_default() += w;
            }
        }
        for rid in &subgraph.relations {
            let r = graph.relation(*rid).expect("subgraph relation exists");
            for c in &r.provenance {
                chunk_score.entry(c.clone()).or_default();
            }
        }

        let mut accesses = 0;
        let mut ranked = Vec::with_capacity(chunk_score.len());
        for (id, base) in chunk_score {
            accesses += 1;
            match store.get_chunk(&id) {
                Ok(chunk) => {
                    let kind = chunk.kind_hint.unwrap_or(MemoryKind::Episodic);
                    let score = base + self.config.kind_bonus(kind);
                    ranked.push((ScoredChunk { chunk: id, score }, chunk));
                }
                Err(ChunkError::NotFound(_) | ChunkError::Tombstoned { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        ranked.sort_by(|(a, _), (b, _)| {
            b.score
                .total_cmp(&a.score)
                .then(b.chunk.sequence.cmp(&a.chunk.sequence))
        });
        let (live, fetched): (Vec<ScoredChunk>, Vec<Arc<Chunk>>) = ranked.into_iter().unzip();

        let sep = &self.config.context_separator;
        let sep_len = sep.chars().count();
        let mut context = String::new();
        let mut used = 0usize;
        for (i, chunk) in fetched.iter().enumerate() {
            let extra = chunk.content.chars().count() + if i == 0 { 0 } else { sep_len };
            if used + extra > params.context_budget {
                break;
            }
            if i > 0 {
                context.push_str(sep);
            }
            context.push_str(&chunk.content);
            used += extra;
        }

        Ok(RetrievalResult {
            query: query.to_string(),
            matched_entities: matched,
            subgraph,
            chunks: live,
            media: crate::ltm_graph::union_media(&fetched),
            context,
            accesses,
        })
    }

    /// Appends retrieved context to the query; returns the query unchanged
    /// when nothing fits the budget.
    pub fn rewrite_query(
        &self,
        graph: &LtmGraph,
        store: &ChunkStore,
        query: &str,
        params: &RetrievalParams,
    ) -> Result<String, RetrievalError> {
        let result = self.retrieve(graph, store, query, params)?;
        Ok(self.rewrite_with(query, &result))
    }

    pub fn rewrite_with(&self, query: &str, result: &RetrievalResult) -> String {
        if result.context.is_empty() {
            query.to_string()
        } else {
            format!("{query} {} {}", self.config.rewrite_separator, result.context)
        }
    }
}

impl Default for Retriever {
    fn default() -> Self {
        Self::new(RetrievalConfig::default())
    }
}
