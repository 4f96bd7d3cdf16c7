//! Versioned graph snapshots.
//!
//! The snapshot is a JSON document whose tables are written in id order and
//! whose sets are sorted, so equal graphs serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Entity, GraphConfig, GraphError, LtmGraph, Relation};

pub const GRAPH_FORMAT: &str = "memverse-graph/1";

#[derive(Serialize)]
struct SnapshotOut<'a> {
    format: &'static str,
    next_entity_id: u64,
    next_relation_id: u64,
    entities: Vec<&'a Entity>,
    relations: Vec<&'a Relation>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotIn {
    format: String,
    next_entity_id: u64,
    next_relation_id: u64,
    entities: Vec<Entity>,
    relations: Vec<Relation>,
}

fn invalid(msg: impl Into<String>) -> GraphError {
    GraphError::Io(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

impl LtmGraph {
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let doc = SnapshotOut {
            format: GRAPH_FORMAT,
            next_entity_id: self.next_entity,
            next_relation_id: self.next_relation,
            entities: self.entities.values().collect(),
            relations: self.relations.values().collect(),
        };
        let mut out = serde_json::to_vec_pretty(&doc).expect("graph serializes");
        out.push(b'\n');
        out
    }

    /// Hex SHA-256 of the canonical snapshot.
    pub fn snapshot_digest(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot_bytes()))
    }

    /// Writes the snapshot atomically (temp file + rename).
    pub fn snapshot(&self, path: &Path) -> Result<(), GraphError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.snapshot_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn restore(path: &Path, config: GraphConfig) -> Result<Self, GraphError> {
        let bytes = fs::read(path)?;
        Self::from_snapshot_bytes(&bytes, config)
    }

    /// Parses a snapshot; never yields a partially loaded graph.
    pub fn from_snapshot_bytes(bytes: &[u8], config: GraphConfig) -> Result<Self, GraphError> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| invalid(format!("snapshot is not valid JSON: {e}")))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(GRAPH_FORMAT) => {}
            Some(other) => return Err(GraphError::FormatVersionMismatch(other.to_string())),
            None => return Err(GraphError::FormatVersionMismatch("<missing>".into())),
        }
        let doc: SnapshotIn = serde_json::from_value(value).map_err(|e| invalid(e.to_string()))?;
        debug_assert_eq!(doc.format, GRAPH_FORMAT);

        let mut entities = BTreeMap::new();
        for e in doc.entities {
            if e.provenance.is_empty() || e.kinds.is_empty() {
                return Err(invalid(format!("entity {} has empty provenance or kinds", e.id)));
            }
            if e.id.0 >= doc.next_entity_id {
                return Err(invalid(format!("entity {} beyond next id", e.id)));
            }
            if entities.insert(e.id, e).is_some() {
                return Err(invalid("duplicate entity id"));
            }
        }
        let mut relations = BTreeMap::new();
        for r in doc.relations {
            if r.provenance.is_empty() || r.kinds.is_empty() {
                return Err(invalid(format!("relation {} has empty provenance or kinds", r.id)));
            }
            if !entities.contains_key(&r.src) || !entities.contains_key(&r.dst) {
                return Err(invalid(format!("relation {} references a missing entity", r.id)));
            }
            if r.id.0 >= doc.next_relation_id {
                return Err(invalid(format!("relation {} beyond next id", r.id)));
            }
            if relations.insert(r.id, r).is_some() {
                return Err(invalid("duplicate relation id"));
            }
        }
        let mut g = LtmGraph {
            entities,
            relations,
            next_entity: doc.next_entity_id,
            next_relation: doc.next_relation_id,
            config,
            ..Default::default()
        };
        g.reindex();
        if g.by_name.len() != g.entities.len() {
            return Err(invalid("duplicate canonical entity names"));
        }
        if g.by_triple.len() != g.relations.len() {
            return Err(invalid("duplicate relation triples"));
        }
        Ok(g)
    }
}
