//! Persistent engine: add turns, route queries, consolidate on schedule, reopen.

use std::sync::Arc;
use std::time::Duration;

use memverse::clock::{ManualClock, Timestamp};
use memverse::orchestrator::{AddOp, MemoryOp, MemverseConfig, OpResult, Orchestrator, RetrieveOp};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let clock = Arc::new(ManualClock::new(Timestamp::from_millis(1_700_000_000_000)));
    let mut config = MemverseConfig::default();
    config.stm.capacity = 2;
    config.orchestrator.consolidation_threshold = 4;

    let mut engine = Orchestrator::open(dir.path(), config.clone(), clock.clone())?;
    let turns = [
        "My sister Maya lives in Denver.",
        "Maya works as a nurse.",
        "I adopted a cat named Pixel.",
        "Pixel is a tabby.",
    ];
    for t in turns {
        if let OpResult::Added { chunk, kind, .. } = engine.handle(MemoryOp::Add(AddOp::text(t, "chat")))? {
            println!("added {chunk} as {}", kind.as_str());
        }
        clock.advance(Duration::from_secs(5));
        for report in engine.maintain() {
            println!("scheduled: {report:?}");
        }
    }

    for q in ["What is Pixel?", "Where does Maya live?"] {
        let mut op = RetrieveOp::query(q);
        op.session = Some("chat".into());
        let answer = engine.handle(MemoryOp::Retrieve(op))?;
        let a = answer.answer().unwrap();
        println!(
            "{q}\n  via {} ({})\n  {}",
            a.decision.path.as_str(),
            a.decision.reason,
            a.context.replace('\n', " | ")
        );
    }
    engine.save()?;
    let before = engine.stats();
    drop(engine);

    let reopened = Orchestrator::open(dir.path(), config, clock)?;
    assert_eq!(reopened.stats(), before);
    println!(
        "reopened with {} chunks and {} entities",
        before.chunks_live, before.graph.entity_count
    );
    Ok(())
}
