//! The HTTP API served in-process, exercised with a blocking client.

use std::sync::Arc;

use memverse::clock::SystemClock;
use memverse::orchestrator::{MemverseConfig, Orchestrator};
use memverse::service::{echo_parametric_router, router, Envelope};
use parking_lot::Mutex;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rt = tokio::runtime::Runtime::new()?;
    let (addr, echo_addr) = rt.block_on(async {
        let echo = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let echo_addr = echo.local_addr()?;
        tokio::spawn(async move { axum::serve(echo, echo_parametric_router(0)).await });

        let mut config = MemverseConfig::default();
        config.parametric.endpoint = Some(format!("http://{echo_addr}"));
        config.orchestrator.domain_tag = "trivia".into();
        let engine = Orchestrator::in_memory(config, Arc::new(SystemClock)).map_err(std::io::Error::other)?;
        let api = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = api.local_addr()?;
        tokio::spawn(async move { axum::serve(api, router(Arc::new(Mutex::new(engine)))).await });
        Ok::<_, std::io::Error>((addr, echo_addr))
    })?;
    println!("api on {addr}, parametric echo on {echo_addr}");

    let client = reqwest::blocking::Client::new();
    let base = format!("http://{addr}/v1");
    let added: Envelope = client
        .post(format!("{base}/memory"))
        .json(&serde_json::json!({"content": "Rosa plays the Cello.", "session": "s1"}))
        .send()?
        .json()?;
    println!("add -> {}", serde_json::to_string(&added.data)?);

    let consolidated: Envelope = client.post(format!("{base}/consolidate")).send()?.json()?;
    println!("consolidate -> {}", serde_json::to_string(&consolidated.data)?);

    let ltm: Envelope = client
        .get(format!(
            "{base}/query?q=Which+instrument+does+Rosa+play%3F&path=ltm&choices=Cello,Drums"
        ))
        .send()?
        .json()?;
    println!(
        "ltm query: {} accesses, context {:?}",
        ltm.accesses, ltm.data["context"]
    );

    let dir = tempfile::tempdir()?;
    let exported: Envelope = client
        .post(format!("{base}/export"))
        .json(&serde_json::json!({"out": dir.path().join("round-0001.jsonl"), "domain": "trivia"}))
        .send()?
        .json()?;
    println!("export -> {}", serde_json::to_string(&exported.data["manifest"])?);

    let routed: Envelope = client
        .get(format!(
            "{base}/query?q=What+does+Rosa+play%3F&domain=trivia&session=other"
        ))
        .send()?
        .json()?;
    println!("domain query via {:?}: {}", routed.path, routed.data["parametric"]);

    let missing = client.delete(format!("{base}/memory/c99")).send()?;
    println!("delete c99 -> {} {}", missing.status(), missing.text()?);
    Ok(())
}
