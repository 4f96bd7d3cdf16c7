//! Recording retrieval traces and exporting a training round.

use std::sync::Arc;

use memverse::clock::{ManualClock, Timestamp};
use memverse::distill_export::{format_prompt, load_training_file, verify_export};
use memverse::orchestrator::{AddOp, MemoryOp, MemverseConfig, Orchestrator, RetrieveOp, RoutePath};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let clock = Arc::new(ManualClock::new(Timestamp::from_millis(0)));
    let mut engine = Orchestrator::in_memory(MemverseConfig::default(), clock)?;

    for (i, f) in ["Quinn studies Marine Biology.", "Quinn lives in Halifax."]
        .iter()
        .enumerate()
    {
        engine.handle(MemoryOp::Add(AddOp::text(*f, format!("s{i}"))))?;
    }
    engine.consolidate()?;

    let choices = vec!["Halifax".to_string(), "Calgary".to_string()];
    println!("prompt: {}", format_prompt("Where does Quinn live?", Some(&choices))?);

    let mut op = RetrieveOp::query("Where does Quinn live?");
    op.choices = Some(choices);
    op.path_hint = Some(RoutePath::LtmRetrieval);
    engine.handle(MemoryOp::Retrieve(op))?;

    let out = dir.path().join("round-0001.jsonl");
    let (path, manifest) = engine.export(Some(out), Some("geography".into()))?;
    print!("manifest:\n{}", manifest.render());
    verify_export(&path)?;
    for record in load_training_file(&path)? {
        println!("{} round {}: {:?}", record.trace_id, record.round, record.target);
    }
    Ok(())
}
