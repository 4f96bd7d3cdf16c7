#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use memverse::orchestrator::Orchestrator;
use memverse::service::{echo_parametric_router, router, SharedEngine};
use parking_lot::Mutex;

const SYLLABLES: [&str; 20] = [
    "ba", "ko", "mi", "ru", "te", "lo", "sa", "ni", "vu", "de", "fa", "zo", "pe", "hu", "ga", "ri", "no", "ta", "me",
    "ki",
];

/// Distinct capitalized pseudo-names for index `i` (up to 8000).
pub fn name(i: usize) -> String {
    let raw = format!(
        "{}{}{}",
        SYLLABLES[i % 20],
        SYLLABLES[(i / 20) % 20],
        SYLLABLES[(i / 400) % 20]
    );
    let mut c = raw.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Background runtime hosting HTTP routers on ephemeral ports.
pub struct Servers {
    pub rt: tokio::runtime::Runtime,
}

impl Servers {
    pub fn new() -> Self {
        Self {
            rt: tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap(),
        }
    }

    fn spawn(&self, app: axum::Router) -> SocketAddr {
        self.rt.block_on(async {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            let addr = listener.local_addr().unwrap();
            tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
            addr
        })
    }

    /// Serves the API for `engine`; returns the `/v1` base url.
    pub fn api(&self, engine: SharedEngine) -> String {
        format!("http://{}/v1", self.spawn(router(engine)))
    }

    pub fn echo(&self, trained_round: u32) -> String {
        format!("http://{}", self.spawn(echo_parametric_router(trained_round)))
    }
}

pub fn shared(engine: Orchestrator) -> SharedEngine {
    Arc::new(Mutex::new(engine))
}
