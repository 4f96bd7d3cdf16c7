//! Query matching, multi-hop expansion and context rewriting.

use std::sync::Arc;

use memverse::chunk_store::{ChunkStore, NewChunk};
use memverse::clock::{Clock, SystemClock};
use memverse::extractor::{extract, RuleExtractor};
use memverse::ltm_graph::{GraphConfig, LtmGraph};
use memverse::retrieval::{RetrievalParams, Retriever};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = Arc::new(SystemClock);
    let store = ChunkStore::in_memory(clock.clone());
    let facts = [
        "Dana owns a bakery called Rye House.",
        "Rye House is located in Oslo.",
        "Evan teaches Physics at Oslo University.",
        "Dana hired Evan last spring.",
    ];
    let mut chunks = Vec::new();
    for (i, f) in facts.iter().enumerate() {
        let id = store.put_chunk(NewChunk::text(*f, "notes", i as u64))?;
        chunks.push(store.get_chunk(&id)?);
    }
    let mut graph = LtmGraph::new(GraphConfig::default());
    graph.merge_extraction(&extract(&chunks, &RuleExtractor::new(512))?, &store, clock.now())?;

    let mut retriever = Retriever::default();
    retriever.rebuild(&graph);
    let params = RetrievalParams::default();

    for query in ["Where is Rye House?", "Who did Dana hire?"] {
        let result = retriever.retrieve(&graph, &store, query, &params)?;
        println!("query: {query}");
        for m in &result.matched_entities {
            println!("  match {} (score {:.3})", m.name, m.score);
        }
        println!("  fetched {} chunks", result.accesses);
        println!("  rewritten: {}\n", retriever.rewrite_with(query, &result));
    }
    Ok(())
}
