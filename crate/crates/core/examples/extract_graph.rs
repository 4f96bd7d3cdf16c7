//! Rule-based extraction merged into the long-term graph, then pruned.

use std::sync::Arc;

use memverse::chunk_store::{ChunkStore, NewChunk};
use memverse::clock::SystemClock;
use memverse::extractor::{extract, RuleExtractor};
use memverse::kind::MemoryKind;
use memverse::ltm_graph::{GraphConfig, LtmGraph, PruneBudget};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = Arc::new(SystemClock);
    let store = ChunkStore::in_memory(clock.clone());
    let facts = [
        "Alice works at Mercy Hospital.",
        "Alice is married to Bob.",
        "Bob plays Chess on Sundays.",
        "Carol visited Paris in June.",
    ];
    let chunks = facts
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let id = store.put_chunk(NewChunk::text(*f, "s1", i as u64))?;
            store.get_chunk(&id)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let result = extract(&chunks, &RuleExtractor::new(512))?;
    println!("description: {}", result.description);

    let mut graph = LtmGraph::new(GraphConfig::default());
    let now = memverse::clock::Clock::now(clock.as_ref());
    let delta = graph.merge_extraction(&result, &store, now)?;
    println!("merged: {delta:?}");
    for r in graph.relations() {
        let src = &graph.entity(r.src).unwrap().display_name;
        let dst = &graph.entity(r.dst).unwrap().display_name;
        println!("  {src} -[{}]-> {dst}  from {} chunks", r.label, r.provenance.len());
    }

    let alice = graph.entity_by_name("Alice").expect("Alice extracted").id;
    let sub = graph.neighbors(alice, 2, &MemoryKind::all())?;
    println!("two hops from Alice: {:?}", sub.entities);

    let budget = PruneBudget {
        max_entities: 3,
        ..PruneBudget::default()
    };
    let report = graph.prune(&budget, now)?;
    println!(
        "pruned {} entities; {} remain",
        report.removed_entities.len(),
        graph.entity_count()
    );
    Ok(())
}
