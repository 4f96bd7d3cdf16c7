//! Entity and relation extraction from chunks.
//!
//! Two backends share one contract: [`RuleExtractor`] is a deterministic
//! pattern extractor used in tests and offline runs, [`RemoteExtractor`]
//! asks an LLM service for an extraction document and validates it. Output
//! from either is checked against the input chunk set before it is handed to
//! the graph, so every extracted element carries provenance drawn only from
//! the chunks it was extracted from.

mod remote;
mod rule;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk_store::{Chunk, ChunkId};
use crate::kind::MemoryKind;
use crate::text::{canonicalize, normalize_display};

pub use remote::{RemoteExtractor, RemoteExtractorConfig, DEFAULT_PROMPT_TEMPLATE, DEFAULT_PROMPT_VERSION};
pub use rule::{rule_parse, sentences, RuleExtractor, SentenceParse};

pub const DEFAULT_COMPRESSION_BUDGET: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedEntity {
    /// Canonical identity key.
    pub name: String,
    pub display_name: String,
    pub etype: String,
    pub kinds: BTreeSet<MemoryKind>,
    pub source_chunks: BTreeSet<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedRelation {
    pub src_name: String,
    pub dst_name: String,
    pub label: String,
    pub kinds: BTreeSet<MemoryKind>,
    pub source_chunks: BTreeSet<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub description: String,
    /// Sorted by canonical name.
    pub entities: Vec<ExtractedEntity>,
    /// Sorted by (src, dst, label).
    pub relations: Vec<ExtractedRelation>,
}

impl ExtractionResult {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    pub fn entity(&self, name: &str) -> Option<&ExtractedEntity> {
        let key = canonicalize(name).key;
        self.entities.iter().find(|e| e.name == key)
    }

    /// Checks the result against the chunks it claims to be derived from.
    pub fn check_invariants(&self, inputs: &BTreeSet<ChunkId>) -> Result<(), ExtractError> {
        let mut names = BTreeSet::new();
        for e in &self.entities {
            if e.name.is_empty() || e.name != canonicalize(&e.name).key {
                return Err(ExtractError::SchemaViolation(format!(
                    "entity name `{}` is not canonical",
                    e.name
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(ExtractError::SchemaViolation(format!("duplicate entity `{}`", e.name)));
            }
            check_sources(&e.source_chunks, inputs, &e.name)?;
            if e.kinds.is_empty() {
                return Err(ExtractError::SchemaViolation(format!(
                    "entity `{}` has no kind",
                    e.name
                )));
            }
        }
        for r in &self.relations {
            for end in [&r.src_name, &r.dst_name] {
                if !names.contains(end.as_str()) {
                    return Err(ExtractError::SchemaViolation(format!(
                        "relation `{}` references unknown entity `{end}`",
                        r.label
                    )));
                }
            }
            if r.label.trim().is_empty() {
                return Err(ExtractError::SchemaViolation("relation with empty label".into()));
            }
            check_sources(&r.source_chunks, inputs, &r.label)?;
            if r.kinds.is_empty() {
                return Err(ExtractError::SchemaViolation(format!(
                    "relation `{}` has no kind",
                    r.label
                )));
            }
        }
        Ok(())
    }

    /// Renders the result in the wire format accepted by [`validate_remote_output`].
    pub fn to_document(&self) -> String {
        let seqs = |s: &BTreeSet<ChunkId>| s.iter().map(|c| c.sequence).collect::<Vec<_>>();
        let mut entities = Vec::new();
        for e in &self.entities {
            for k in &e.kinds {
                entities.push(WireEntity {
                    name: e.display_name.clone(),
                    etype: e.etype.clone(),
                    kind: *k,
                    chunks: seqs(&e.source_chunks),
                });
            }
        }
        let mut relations = Vec::new();
        for r in &self.relations {
            for k in &r.kinds {
                relations.push(WireRelation {
                    src: r.src_name.clone(),
                    dst: r.dst_name.clone(),
                    label: r.label.clone(),
                    kind: *k,
                    chunks: seqs(&r.source_chunks),
                });
            }
        }
        serde_json::to_string(&WireDocument {
            description: self.description.clone(),
            entities,
            relations,
        })
        .expect("document serializes")
    }
}

fn check_sources(src: &BTreeSet<ChunkId>, inputs: &BTreeSet<ChunkId>, what: &str) -> Result<(), ExtractError> {
    if src.is_empty() {
        return Err(ExtractError::SchemaViolation(format!("`{what}` has no source chunks")));
    }
    if let Some(bad) = src.iter().find(|c| !inputs.contains(c)) {
        return Err(ExtractError::SchemaViolation(format!(
            "`{what}` cites chunk {bad} outside the input batch"
        )));
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("extraction needs at least one chunk")]
    EmptyInput,
    #[error("extraction backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("extraction output violates schema: {0}")]
    SchemaViolation(String),
    #[error("cannot parse extraction document: {0}")]
    Parse(String),
}

pub trait ExtractorBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Entities, relations and a compressed description for a batch of chunks.
    fn extract(&self, chunks: &[Arc<Chunk>]) -> Result<ExtractionResult, ExtractError>;

    /// Compressed memory description of the batch, within the backend's budget.
    fn compress(&self, chunks: &[Arc<Chunk>]) -> Result<String, ExtractError> {
        Ok(self.extract(chunks)?.description)
    }
}

/// Runs `backend` on a non-empty batch and verifies the result before returning it.
pub fn extract(chunks: &[Arc<Chunk>], backend: &dyn ExtractorBackend) -> Result<ExtractionResult, ExtractError> {
    if chunks.is_empty() {
        return Err(ExtractError::EmptyInput);
    }
    let result = backend.extract(chunks)?;
    let inputs: BTreeSet<ChunkId> = chunks.iter().map(|c| c.id.clone()).collect();
    result.check_invariants(&inputs)?;
    Ok(result)
}

pub fn compress(chunks: &[Arc<Chunk>], backend: &dyn ExtractorBackend) -> Result<String, ExtractError> {
    if chunks.is_empty() {
        return Err(ExtractError::EmptyInput);
    }
    backend.compress(chunks)
}

/// Accumulates entities and relations, merging repeats by canonical identity.
#[derive(Debug, Default)]
pub struct ResultBuilder {
    entities: BTreeMap<String, ExtractedEntity>,
    relations: BTreeMap<(String, String, String), ExtractedRelation>,
}

impl ResultBuilder {
    /// Adds (or merges into) an entity; returns its canonical key.
    pub fn entity(&mut self, raw_name: &str, etype: &str, kind: MemoryKind, chunk: &ChunkId) -> String {
        let name = canonicalize(raw_name);
        let e = self
            .entities
            .entry(name.key.clone())
            .or_insert_with(|| ExtractedEntity {
                name: name.key.clone(),
                display_name: name.display.clone(),
                etype: etype.to_string(),
                kinds: BTreeSet::new(),
                source_chunks: BTreeSet::new(),
            });
        if e.etype == UNKNOWN_TYPE && etype != UNKNOWN_TYPE {
            e.etype = etype.to_string();
        }
        e.kinds.insert(kind);
        e.source_chunks.insert(chunk.clone());
        name.key
    }

    pub fn relation(&mut self, src_key: &str, dst_key: &str, label: &str, kind: MemoryKind, chunk: &ChunkId) {
        let label = normalize_display(label).to_lowercase();
        let r = self
            .relations
            .entry((src_key.to_string(), dst_key.to_string(), label.clone()))
            .or_insert_with(|| ExtractedRelation {
                src_name: src_key.to_string(),
                dst_name: dst_key.to_string(),
                label,
                kinds: BTreeSet::new(),
                source_chunks: BTreeSet::new(),
            });
        r.kinds.insert(kind);
        r.source_chunks.insert(chunk.clone());
    }

    pub fn finish(self, description: String) -> ExtractionResult {
        ExtractionResult {
            description,
            entities: self.entities.into_values().collect(),
            relations: self.relations.into_values().collect(),
        }
    }
}

pub const UNKNOWN_TYPE: &str = "unknown";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEntity {
    name: String,
    etype: String,
    kind: MemoryKind,
    chunks: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRelation {
    src: String,
    dst: String,
    label: String,
    kind: MemoryKind,
    chunks: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireDocument {
    description: String,
    entities: Vec<WireEntity>,
    relations: Vec<WireRelation>,
}

/// Parses and validates an extraction document produced for `inputs`.
///
/// Chunk references in the document are sequence numbers and must all belong
/// to `inputs`. Entities repeated under the same canonical name are merged.
pub fn validate_remote_output(raw: &str, inputs: &[ChunkId]) -> Result<ExtractionResult, ExtractError> {
    let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| ExtractError::Parse(e.to_string()))?;
    let doc: WireDocument = serde_json::from_value(value).map_err(|e| ExtractError::SchemaViolation(e.to_string()))?;

    let by_seq: BTreeMap<u64, &ChunkId> = inputs.iter().map(|c| (c.sequence, c)).collect();
    let resolve = |seqs: &[u64], what: &str| -> Result<Vec<ChunkId>, ExtractError> {
        if seqs.is_empty() {
            return Err(ExtractError::SchemaViolation(format!("`{what}` has no source chunks")));
        }
        seqs.iter()
            .map(|s| {
                by_seq.get(s).map(|c| (*c).clone()).ok_or_else(|| {
                    ExtractError::SchemaViolation(format!("`{what}` cites chunk {s} outside the input batch"))
                })
            })
            .collect()
    };

    let mut b = ResultBuilder::default();
    for e in &doc.entities {
        if canonicalize(&e.name).key.is_empty() {
            return Err(ExtractError::SchemaViolation("entity with empty name".into()));
        }
        let etype = if e.etype.trim().is_empty() {
            UNKNOWN_TYPE
        } else {
            e.etype.trim()
        };
        for c in resolve(&e.chunks, &e.name)? {
            b.entity(&e.name, etype, e.kind, &c);
        }
    }
    for r in &doc.relations {
        let src = canonicalize(&r.src).key;
        let dst = canonicalize(&r.dst).key;
        for end in [&src, &dst] {
            if !b.entities.contains_key(end) {
                return Err(ExtractError::SchemaViolation(format!(
                    "relation `{}` references unknown entity `{end}`",
                    r.label
                )));
            }
        }
        if r.label.trim().is_empty() {
            return Err(ExtractError::SchemaViolation("relation with empty label".into()));
        }
        for c in resolve(&r.chunks, &r.label)? {
            b.relation(&src, &dst, &r.label, r.kind, &c);
        }
    }
    let result = b.finish(doc.description);
    result.check_invariants(&inputs.iter().cloned().collect())?;
    Ok(result)
}
