//! HTTP front end.
//!
//! Every response body is an [`Envelope`] `{op, path, accesses, data}`;
//! failures are `{code, message}` with a matching status. Handlers share one
//! engine behind a mutex, so requests are applied one at a time in arrival
//! order; after each mutating request the due scheduled actions run and the
//! state is saved.
//!
//! | method | path | operation |
//! |---|---|---|
//! | POST | /v1/memory | add |
//! | PATCH | /v1/memory/{chunk} | update (supersede) |
//! | DELETE | /v1/memory/{chunk or entity} | delete |
//! | GET | /v1/query?q=&hops=&budget=&top_m=&kinds=&path=&session=&domain=&choices= | retrieve |
//! | POST | /v1/consolidate | consolidate now |
//! | POST | /v1/prune | prune now |
//! | POST | /v1/export | export the current round |
//! | GET | /v1/stats | counters |
//! | GET | /v1/healthz | liveness |

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk_store::ChunkError;
use crate::clock::Clock;
use crate::distill_export::DistillError;
use crate::extractor::ExtractError;
use crate::ingest::IngestError;
use crate::kind::parse_kind_list;
use crate::ltm_graph::{EntityId, GraphError};
use crate::orchestrator::parametric::GenerateRequest;
use crate::orchestrator::{
    AddOp, DeleteTarget, MemoryOp, MemverseConfig, OpResult, Orchestrator, OrchestratorError, ParametricError,
    RetrieveOp, RoutePath,
};
use crate::retrieval::RetrievalError;

pub type SharedEngine = Arc<Mutex<Orchestrator>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub op: String,
    pub path: Option<RoutePath>,
    pub accesses: usize,
    pub data: serde_json::Value,
}

impl Envelope {
    pub fn new(op: &str, data: impl Serialize) -> Self {
        Self {
            op: op.to_string(),
            path: None,
            accesses: 0,
            data: serde_json::to_value(data).expect("response serializes"),
        }
    }

    pub fn from_result(result: &OpResult) -> Self {
        let mut env = Self::new(result.op_name(), result);
        if let Some(a) = result.answer() {
            env.path = Some(a.decision.path);
            env.accesses = a.accesses;
        }
        env
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Stable error code and HTTP status for an engine error.
pub fn classify_error(e: &OrchestratorError) -> (StatusCode, &'static str) {
    use OrchestratorError as E;
    match e {
        E::Store(ChunkError::NotFound(_)) | E::Graph(GraphError::NotFound(_)) => (StatusCode::NOT_FOUND, "not_found"),
        E::Store(ChunkError::Tombstoned { .. }) => (StatusCode::GONE, "tombstoned"),
        E::Store(ChunkError::DuplicateTurn { .. }) => (StatusCode::CONFLICT, "duplicate_turn"),
        E::Store(ChunkError::EmptyContent) => (StatusCode::BAD_REQUEST, "empty_content"),
        E::Store(ChunkError::InvalidMedia) => (StatusCode::BAD_REQUEST, "invalid_media"),
        E::Retrieval(RetrievalError::EmptyQuery) => (StatusCode::BAD_REQUEST, "empty_query"),
        E::Retrieval(RetrievalError::InvalidParams(_)) => (StatusCode::BAD_REQUEST, "invalid_params"),
        E::Graph(GraphError::BudgetInfeasible { .. }) => (StatusCode::CONFLICT, "budget_infeasible"),
        E::Distill(DistillError::NoTraces(_)) => (StatusCode::CONFLICT, "no_traces"),
        E::Distill(DistillError::EmptyQuestion) => (StatusCode::BAD_REQUEST, "empty_question"),
        E::Parametric(ParametricError::EndpointUnavailable(_)) => (StatusCode::BAD_GATEWAY, "endpoint_unavailable"),
        E::Parametric(ParametricError::BadReply(_)) => (StatusCode::BAD_GATEWAY, "bad_parametric_reply"),
        E::Extract(ExtractError::BackendUnavailable(_)) => (StatusCode::BAD_GATEWAY, "extractor_unavailable"),
        E::Ingest(IngestError::CaptionerUnavailable(_)) => (StatusCode::BAD_GATEWAY, "captioner_unavailable"),
        E::Ingest(_) | E::Stm(_) | E::InvalidOp(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
        E::StoreLocked(_) => (StatusCode::CONFLICT, "store_locked"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                code: "invalid_request".into(),
                message: message.into(),
            },
        }
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let (status, code) = classify_error(&e);
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: e.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Json<Envelope>, ApiError>;

/// Runs `f` on the blocking pool with exclusive access to the engine.
async fn with_engine<T, F>(engine: &SharedEngine, f: F) -> Result<T, ApiError>
where
    F: FnOnce(&mut Orchestrator) -> Result<T, OrchestratorError> + Send + 'static,
    T: Send + 'static,
{
    let engine = engine.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = engine.lock();
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        body: ErrorBody {
            code: "internal".into(),
            message: e.to_string(),
        },
    })?
    .map_err(ApiError::from)
}

/// Applies a mutating operation, then runs due maintenance and persists.
pub fn apply_mutation(o: &mut Orchestrator, op: MemoryOp) -> Result<OpResult, OrchestratorError> {
    let result = o.handle(op)?;
    after_mutation(o)?;
    Ok(result)
}

fn after_mutation(o: &mut Orchestrator) -> Result<(), OrchestratorError> {
    for report in o.maintain() {
        tracing::info!(?report, "scheduled action");
    }
    o.save()
}

/// Chunk references accept `c12` or `12`; `e5` names an entity.
pub fn parse_target(raw: &str) -> Result<DeleteTarget, String> {
    let bad = || format!("invalid memory reference {raw:?} (expected c<seq>, <seq> or e<id>)");
    if let Some(rest) = raw.strip_prefix('e') {
        return rest
            .parse()
            .map(|n| DeleteTarget::Entity(EntityId(n)))
            .map_err(|_| bad());
    }
    raw.strip_prefix('c')
        .unwrap_or(raw)
        .parse()
        .map(DeleteTarget::Chunk)
        .map_err(|_| bad())
}

async fn add_memory(State(engine): State<SharedEngine>, Json(op): Json<AddOp>) -> ApiResult {
    let r = with_engine(&engine, move |o| apply_mutation(o, MemoryOp::Add(op))).await?;
    Ok(Json(Envelope::from_result(&r)))
}

#[derive(Debug, Deserialize)]
struct UpdateBody {
    content: String,
}

async fn update_memory(
    State(engine): State<SharedEngine>,
    UrlPath(chunk): UrlPath<String>,
    Json(body): Json<UpdateBody>,
) -> ApiResult {
    let DeleteTarget::Chunk(sequence) = parse_target(&chunk).map_err(ApiError::bad_request)? else {
        return Err(ApiError::bad_request("only chunks can be updated"));
    };
    let op = MemoryOp::Update {
        chunk: sequence,
        content: body.content,
    };
    let r = with_engine(&engine, move |o| apply_mutation(o, op)).await?;
    Ok(Json(Envelope::from_result(&r)))
}

async fn delete_memory(State(engine): State<SharedEngine>, UrlPath(target): UrlPath<String>) -> ApiResult {
    let target = parse_target(&target).map_err(ApiError::bad_request)?;
    let r = with_engine(&engine, move |o| apply_mutation(o, MemoryOp::Delete { target })).await?;
    Ok(Json(Envelope::from_result(&r)))
}

#[derive(Debug, Default, Deserialize)]
pub struct QueryParams {
    pub q: Option<String>,
    pub hops: Option<u32>,
    pub budget: Option<usize>,
    pub top_m: Option<usize>,
    /// Comma-separated memory kinds.
    pub kinds: Option<String>,
    /// Path hint: stm, ltm or parametric.
    pub path: Option<String>,
    pub session: Option<String>,
    pub domain: Option<String>,
    /// Comma-separated answer choices.
    pub choices: Option<String>,
}

/// Builds a retrieve operation from query-string style parameters.
pub fn retrieve_op(config: &MemverseConfig, p: QueryParams) -> Result<RetrieveOp, String> {
    let mut params = config.retrieval_params();
    if let Some(h) = p.hops {
        params.hop_limit = h;
    }
    if let Some(b) = p.budget {
        params.context_budget = b;
    }
    if let Some(m) = p.top_m {
        params.top_m = m;
    }
    if let Some(k) = &p.kinds {
        params.kinds = parse_kind_list(k).map_err(|e| e.to_string())?;
    }
    let path_hint = p.path.as_deref().map(str::parse::<RoutePath>).transpose()?;
    let choices = p.choices.as_deref().map(|c| {
        c.split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
    });
    Ok(RetrieveOp {
        query: p.q.unwrap_or_default(),
        choices,
        session: p.session,
        domain: p.domain,
        path_hint,
        params: Some(params),
    })
}

async fn query(State(engine): State<SharedEngine>, Query(p): Query<QueryParams>) -> ApiResult {
    let r = with_engine(&engine, move |o| {
        let op = retrieve_op(o.config(), p).map_err(OrchestratorError::InvalidOp)?;
        let r = o.handle(MemoryOp::Retrieve(op))?;
        // retrieval updates salience and records a trace
        o.save()?;
        Ok(r)
    })
    .await?;
    Ok(Json(Envelope::from_result(&r)))
}

async fn consolidate(State(engine): State<SharedEngine>) -> ApiResult {
    let r = with_engine(&engine, |o| {
        let r = o.consolidate()?;
        o.save()?;
        Ok(r)
    })
    .await?;
    Ok(Json(Envelope::new("consolidate", r)))
}

async fn prune(State(engine): State<SharedEngine>) -> ApiResult {
    let r = with_engine(&engine, |o| {
        let r = o.prune()?;
        o.save()?;
        Ok(r)
    })
    .await?;
    Ok(Json(Envelope::new("prune", r)))
}

#[derive(Debug, Default, Deserialize)]
pub struct ExportBody {
    pub out: Option<PathBuf>,
    pub domain: Option<String>,
}

#[derive(Debug, Serialize)]
struct Exported {
    path: PathBuf,
    manifest: crate::distill_export::ExportManifest,
}

async fn export(State(engine): State<SharedEngine>, body: Option<Json<ExportBody>>) -> ApiResult {
    let body = body.map(|b| b.0).unwrap_or_default();
    let (path, manifest) = with_engine(&engine, move |o| {
        let (path, manifest) = o.export(body.out, body.domain)?;
        o.save()?;
        // store-relative so responses do not depend on where the store lives
        let shown = match o.dir() {
            Some(dir) => path.strip_prefix(dir).map(PathBuf::from).unwrap_or(path),
            None => path,
        };
        Ok((shown, manifest))
    })
    .await?;
    Ok(Json(Envelope::new("export", Exported { path, manifest })))
}

async fn stats(State(engine): State<SharedEngine>) -> ApiResult {
    let s = with_engine(&engine, |o| Ok(o.stats())).await?;
    Ok(Json(Envelope::new("stats", s)))
}

async fn healthz() -> Json<Envelope> {
    Json(Envelope::new("healthz", serde_json::json!({"status": "ok"})))
}

pub fn router(engine: SharedEngine) -> Router {
    Router::new()
        .route("/v1/memory", post(add_memory))
        .route("/v1/memory/:target", patch(update_memory).delete(delete_memory))
        .route("/v1/query", get(query))
        .route("/v1/consolidate", post(consolidate))
        .route("/v1/prune", post(prune))
        .route("/v1/export", post(export))
        .route("/v1/stats", get(stats))
        .route("/v1/healthz", get(healthz))
        .with_state(engine)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen_addr: SocketAddr,
    pub store_dir: PathBuf,
    pub config_path: Option<PathBuf>,
    pub parametric_endpoint: Option<String>,
    /// How often scheduled actions are checked between requests.
    pub tick_interval: Duration,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Engine(#[from] OrchestratorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn open_engine(config: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<Orchestrator, OrchestratorError> {
    let mut cfg = match &config.config_path {
        Some(p) => MemverseConfig::load(p)?,
        None => MemverseConfig::default(),
    };
    if config.parametric_endpoint.is_some() {
        cfg.parametric.endpoint = config.parametric_endpoint.clone();
    }
    Orchestrator::open(&config.store_dir, cfg, clock)
}

/// Serves until Ctrl-C or SIGTERM, then flushes and snapshots the store.
pub async fn serve(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<(), ServiceError> {
    let opened = {
        let config = config.clone();
        tokio::task::spawn_blocking(move || open_engine(&config, clock))
            .await
            .map_err(std::io::Error::other)??
    };
    let engine: SharedEngine = Arc::new(Mutex::new(opened));
    let listener = tokio::net::TcpListener::bind(config.listen_addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.listen_addr,
            source,
        })?;
    tracing::info!(addr = %listener.local_addr()?, store = %config.store_dir.display(), "serving");

    let ticker = {
        let engine = engine.clone();
        let every = config.tick_interval;
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(every);
            interval.tick().await;
            loop {
                interval.tick().await;
                let _ = with_engine(&engine, |o| {
                    if o.tick(o.now()).is_empty() {
                        Ok(())
                    } else {
                        after_mutation(o)
                    }
                })
                .await;
            }
        })
    };

    axum::serve(listener, router(engine.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    ticker.abort();
    // the engine may own blocking HTTP clients, which must not be dropped on the runtime
    tokio::task::spawn_blocking(move || {
        let result = engine.lock().save();
        drop(engine);
        result
    })
    .await
    .map_err(std::io::Error::other)??;
    tracing::info!("store saved; shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// A parametric endpoint that answers every prompt with the prompt itself.
pub fn echo_parametric_router(trained_round: u32) -> Router {
    Router::new().route(
        "/generate",
        post(move |Json(req): Json<GenerateRequest>| async move {
            Json(serde_json::json!({"text": req.prompt, "trained_round": trained_round}))
        }),
    )
}
