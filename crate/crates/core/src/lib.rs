//! Provenance-linked knowledge-graph memory for agents.

pub mod chunk_store;
pub mod cli;
pub mod clock;
pub mod distill_export;
pub mod extractor;
pub mod ingest;
pub mod kind;
pub mod ltm_graph;
pub mod orchestrator;
pub mod retrieval;
pub mod service;
pub mod stm;
pub mod text;

#[cfg(test)]
mod testutil;
