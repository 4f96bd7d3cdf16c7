//! The memory controller.
//!
//! An [`Orchestrator`] owns one store directory: the chunk log, the graph,
//! the per-session short-term windows, the consolidation queue and the trace
//! ledger. All mutations go through [`Orchestrator::handle`] and the
//! scheduled actions returned by [`Orchestrator::tick`]; behaviour depends
//! only on the configuration, the persisted state and the injected clock.
//!
//! Routing order for queries:
//! 1. `stm_hit` when every token of the query's focal entity (its first
//!    capitalized name) appears in a short-term window;
//! 2. `parametric` when a parametric endpoint is registered and the query's
//!    domain equals the domain tag of the latest export round;
//! 3. `ltm_retrieval` otherwise.
//!
//! A path hint overrides all three.

pub mod classify;
pub mod config;
pub mod parametric;


use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use fs2::FileExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk_store::{ChunkError, ChunkId, ChunkStore, ChunkStoreOptions, MediaRef, NewChunk};
use crate::clock::{Clock, Timestamp};
use crate::distill_export::{format_prompt, DistillError, DistillLedger, ExportManifest, TraceOutcome};
use crate::extractor::{
    extract, rule_parse, sentences, ExtractError, ExtractorBackend, RemoteExtractor, RemoteExtractorConfig,
    RuleExtractor,
};
use crate::ingest::{IngestError, Ingestor};
use crate::kind::MemoryKind;
use crate::ltm_graph::{EntityId, GraphDelta, GraphError, GraphStats, LtmGraph, PruneReport, RepairReport};
use crate::retrieval::{RetrievalError, RetrievalParams, RetrievalResult, Retriever};
use crate::stm::{StmError, StmWindow, Turn};
use crate::text::tokens;

pub use classify::{Classifier, DEFAULT_CORE_LEXICON};
pub use config::MemverseConfig;
pub use parametric::{EchoParametric, HttpParametric, ParametricError, ParametricMemory, ParametricReply};

const STATE_FORMAT: &str = "memverse-state/1";
const STATE_FILE: &str = "state.json";
const GRAPH_FILE: &str = "graph.snapshot";
const CHUNK_DIR: &str = "chunks";
const LOCK_FILE: &str = "LOCK";
const EXPORT_DIR: &str = "exports";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Store(#[from] ChunkError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Stm(#[from] StmError),
    #[error(transparent)]
    Parametric(#[from] ParametricError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("store {0} is locked by another process")]
    StoreLocked(PathBuf),
    #[error("invalid operation: {0}")]
    InvalidOp(String),
    #[error("state file: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePath {
    StmHit,
    LtmRetrieval,
    Parametric,
}

impl RoutePath {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutePath::StmHit => "stm_hit",
            RoutePath::LtmRetrieval => "ltm_retrieval",
            RoutePath::Parametric => "parametric",
        }
    }
}

impl fmt::Display for RoutePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutePath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stm" | "stm_hit" => Ok(RoutePath::StmHit),
            "ltm" | "ltm_retrieval" => Ok(RoutePath::LtmRetrieval),
            "parametric" => Ok(RoutePath::Parametric),
            other => Err(format!("unknown path {other:?} (expected stm, ltm or parametric)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub path: RoutePath,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddOp {
    pub content: String,
    #[serde(default)]
    pub media: Vec<MediaRef>,
    pub session: String,
    /// Next free turn of the session when absent.
    #[serde(default)]
    pub turn: Option<u64>,
    /// Classified from the content when absent.
    #[serde(default)]
    pub kind: Option<MemoryKind>,
}

impl AddOp {
    pub fn text(content: impl Into<String>, session: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            media: Vec::new(),
            session: session.into(),
            turn: None,
            kind: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrieveOp {
    pub query: String,
    #[serde(default)]
    pub choices: Option<Vec<String>>,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub path_hint: Option<RoutePath>,
    #[serde(default)]
    pub params: Option<RetrievalParams>,
}

impl RetrieveOp {
    pub fn query(q: impl Into<String>) -> Self {
        Self {
            query: q.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeleteTarget {
    /// Chunk sequence number.
    Chunk(u64),
    Entity(EntityId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MemoryOp {
    Add(AddOp),
    Update { chunk: u64, content: String },
    Delete { target: DeleteTarget },
    Retrieve(RetrieveOp),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParametricAnswer {
    pub text: String,
    pub trained_round: u32,
    /// Export rounds the endpoint is behind.
    pub staleness_rounds: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub decision: RoutingDecision,
    pub context: String,
    pub accesses: usize,
    /// Short-term turns that answered the query.
    pub stm_turns: Vec<ChunkId>,
    pub retrieval: Option<RetrievalResult>,
    pub parametric: Option<ParametricAnswer>,
    pub trace: Option<TraceOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpResult {
    Added {
        chunk: ChunkId,
        session: String,
        turn: u64,
        kind: MemoryKind,
        stm_evicted: Option<ChunkId>,
    },
    Updated {
        old: ChunkId,
        new: ChunkId,
        repair: RepairReport,
    },
    Deleted {
        chunk: Option<ChunkId>,
        entity: Option<EntityId>,
        repair: RepairReport,
    },
    Retrieved(Answer),
}

impl OpResult {
    pub fn op_name(&self) -> &'static str {
        match self {
            OpResult::Added { .. } => "add",
            OpResult::Updated { .. } => "update",
            OpResult::Deleted { .. } => "delete",
            OpResult::Retrieved(_) => "retrieve",
        }
    }

    pub fn answer(&self) -> Option<&Answer> {
        match self {
            OpResult::Retrieved(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Consolidate,
    Prune,
    DistillExport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionReport {
    Consolidated {
        chunks: usize,
        /// Consolidated chunks that produced no graph element.
        unreferenced: usize,
        delta: GraphDelta,
    },
    Pruned(PruneReport),
    Exported {
        path: PathBuf,
        manifest: ExportManifest,
    },
    Failed {
        failed: Action,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    /// Chunks added or corrected since they were last consolidated.
    pub pending: BTreeSet<ChunkId>,
    /// Sequences already consolidated.
    pub processed: BTreeSet<u64>,
    pub last_consolidation: Timestamp,
    pub last_prune: Timestamp,
    pub last_distill: Timestamp,
}

impl SchedulerState {
    fn starting_at(now: Timestamp) -> Self {
        Self {
            pending: BTreeSet::new(),
            processed: BTreeSet::new(),
            last_consolidation: now,
            last_prune: now,
            last_distill: now,
        }
    }

    pub fn new_chunks_since_consolidation(&self) -> usize {
        self.pending.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub chunks_live: usize,
    pub chunks_total: usize,
    pub pending: usize,
    pub sessions: usize,
    pub stm_turns: usize,
    pub graph: GraphStats,
    pub current_round: u32,
    pub traces_pending: usize,
    pub traces_skipped: u64,
    pub exported_pairs: u64,
}

#[derive(Serialize, Deserialize)]
struct PersistedState {
    format: String,
    scheduler: SchedulerState,
    stm: BTreeMap<String, StmWindow>,
    ledger: DistillLedger,
}

fn sum_delta(a: &mut GraphDelta, b: GraphDelta) {
    a.entities_added += b.entities_added;
    a.entities_updated += b.entities_updated;
    a.relations_added += b.relations_added;
    a.relations_updated += b.relations_updated;
    a.provenance_added += b.provenance_added;
}

/// Tokens of the first capitalized name in the query.
fn focal_entity(query: &str) -> Option<(String, BTreeSet<String>)> {
    sentences(query)
        .flat_map(|s| rule_parse(s).entities)
        .map(|name| {
            let toks: BTreeSet<String> = tokens(&name).into_iter().collect();
            (name, toks)
        })
        .find(|(_, t)| !t.is_empty())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub struct Orchestrator {
    config: MemverseConfig,
    clock: Arc<dyn Clock>,
    store: ChunkStore,
    graph: LtmGraph,
    retriever: Retriever,
    classifier: Classifier,
    extractor: Arc<dyn ExtractorBackend>,
    ingestor: Ingestor,
    parametric: Option<Arc<dyn ParametricMemory>>,
    stm: BTreeMap<String, StmWindow>,
    sched: SchedulerState,
    ledger: DistillLedger,
    dir: Option<PathBuf>,
    _lock: Option<File>,
}

impl fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Orchestrator")
            .field("dir", &self.dir)
            .field("chunks", &self.store.total_count())
            .field("entities", &self.graph.entity_count())
            .field("pending", &self.sched.pending.len())
            .finish()
    }
}

impl Orchestrator {
    /// A volatile engine; nothing touches the filesystem except explicit exports.
    pub fn in_memory(config: MemverseConfig, clock: Arc<dyn Clock>) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let store = ChunkStore::in_memory(clock.clone());
        let graph = LtmGraph::new(config.graph_config());
        let sched = SchedulerState::starting_at(clock.now());
        Self::assemble(
            config,
            clock,
            store,
            graph,
            sched,
            BTreeMap::new(),
            DistillLedger::default(),
            None,
            None,
        )
    }

    /// Opens (creating if needed) the store directory `dir` and takes its lock.
    pub fn open(dir: &Path, config: MemverseConfig, clock: Arc<dyn Clock>) -> Result<Self, OrchestratorError> {
        config.validate()?;
        fs::create_dir_all(dir)?;
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(LOCK_FILE))?;
        if lock.try_lock_exclusive().is_err() {
            return Err(OrchestratorError::StoreLocked(dir.to_path_buf()));
        }
        let store = ChunkStore::open(&dir.join(CHUNK_DIR), ChunkStoreOptions::default(), clock.clone())?;
        let graph_path = dir.join(GRAPH_FILE);
        let graph = if graph_path.exists() {
            LtmGraph::restore(&graph_path, config.graph_config())?
        } else {
            LtmGraph::new(config.graph_config())
        };
        let state_path = dir.join(STATE_FILE);
        let (sched, stm, ledger) = if state_path.exists() {
            let st: PersistedState =
                serde_json::from_slice(&fs::read(&state_path)?).map_err(|e| OrchestratorError::State(e.to_string()))?;
            if st.format != STATE_FORMAT {
                return Err(OrchestratorError::State(format!(
                    "unsupported state format {:?}",
                    st.format
                )));
            }
            (st.scheduler, st.stm, st.ledger)
        } else {
            (
                SchedulerState::starting_at(clock.now()),
                BTreeMap::new(),
                DistillLedger::default(),
            )
        };
        let mut orch = Self::assemble(
            config,
            clock,
            store,
            graph,
            sched,
            stm,
            ledger,
            Some(dir.to_path_buf()),
            Some(lock),
        )?;
        orch.reconcile();
        Ok(orch)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: MemverseConfig,
        clock: Arc<dyn Clock>,
        store: ChunkStore,
        graph: LtmGraph,
        sched: SchedulerState,
        mut stm: BTreeMap<String, StmWindow>,
        ledger: DistillLedger,
        dir: Option<PathBuf>,
        lock: Option<File>,
    ) -> Result<Self, OrchestratorError> {
        let classifier = match &config.classify.core_lexicon {
            Some(p) => Classifier::from_lexicon_file(p)
                .map_err(|e| OrchestratorError::Config(format!("core lexicon {}: {e}", p.display())))?,
            None => Classifier::default(),
        };
        let extractor: Arc<dyn ExtractorBackend> = match &config.extractor.endpoint {
            Some(url) => {
                let mut rc = RemoteExtractorConfig::new(url.clone(), config.extractor.model.clone());
                rc.compression_budget = config.extractor.compression_budget;
                Arc::new(RemoteExtractor::new(rc))
            }
            None => Arc::new(RuleExtractor::new(config.extractor.compression_budget)),
        };
        let parametric: Option<Arc<dyn ParametricMemory>> = config.parametric.endpoint.as_ref().map(|url| {
            Arc::new(HttpParametric::new(
                url.clone(),
                Duration::from_millis(config.parametric.timeout_ms),
            )) as Arc<dyn ParametricMemory>
        });
        for w in stm.values_mut() {
            if w.capacity() != config.stm.capacity {
                w.resize(config.stm.capacity)?;
            }
        }
        let mut retriever = Retriever::new(config.retrieval_config());
        retriever.rebuild(&graph);
        let ingestor = Ingestor::with_mocks(clock.clone());
        Ok(Self {
            config,
            clock,
            store,
            graph,
            retriever,
            classifier,
            extractor,
            ingestor,
            parametric,
            stm,
            sched,
            ledger,
            dir,
            _lock: lock,
        })
    }

    /// Brings derived state in line with the chunk log after an unclean stop:
    /// provenance pointing at dead chunks is repaired and live chunks that
    /// were never consolidated are queued again.
    fn reconcile(&mut self) {
        let dead: BTreeSet<ChunkId> = self
            .graph
            .entities()
            .flat_map(|e| e.provenance.iter())
            .chain(self.graph.relations().flat_map(|r| r.provenance.iter()))
            .filter(|c| !self.store.is_live(c))
            .cloned()
            .collect();
        for c in &dead {
            self.graph.repair_chunk(c);
        }
        self.sched.pending.retain(|c| self.store.is_live(c));
        for c in self.store.live_chunks() {
            if !self.sched.processed.contains(&c.id.sequence) {
                self.sched.pending.insert(c.id.clone());
            }
        }
        for w in self.stm.values_mut() {
            let gone: Vec<ChunkId> = w
                .turns()
                .filter(|t| !self.store.is_live(&t.chunk_id))
                .map(|t| t.chunk_id.clone())
                .collect();
            for id in gone {
                w.remove(&id);
            }
        }
        if !dead.is_empty() {
            tracing::warn!(
                chunks = dead.len(),
                "repaired provenance to chunks deleted before last shutdown"
            );
        }
        self.retriever.rebuild(&self.graph);
    }

    pub fn config(&self) -> &MemverseConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn store(&self) -> &ChunkStore {
        &self.store
    }

    pub fn graph(&self) -> &LtmGraph {
        &self.graph
    }

    pub fn ledger(&self) -> &DistillLedger {
        &self.ledger
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.sched
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn stm(&self, session: &str) -> Option<&StmWindow> {
        self.stm.get(session)
    }

    pub fn ingestor(&self) -> &Ingestor {
        &self.ingestor
    }

    pub fn set_parametric(&mut self, client: Option<Arc<dyn ParametricMemory>>) {
        self.parametric = client;
    }

    pub fn set_extractor(&mut self, backend: Arc<dyn ExtractorBackend>) {
        self.extractor = backend;
    }

    pub fn classify(&self, text: &str) -> MemoryKind {
        self.classifier.classify(text)
    }

    /// Applies one operation. A failed operation leaves no partial effect.
    pub fn handle(&mut self, op: MemoryOp) -> Result<OpResult, OrchestratorError> {
        match op {
            MemoryOp::Add(add) => self.add(add),
            MemoryOp::Update { chunk, content } => self.update(chunk, content),
            MemoryOp::Delete { target } => self.delete(target),
            MemoryOp::Retrieve(r) => self.retrieve(r).map(OpResult::Retrieved),
        }
    }

    fn next_turn(&self, session: &str) -> u64 {
        self.store
            .list_session(session)
            .last()
            .map(|c| c.turn_index + 1)
            .unwrap_or(0)
    }

    fn add(&mut self, op: AddOp) -> Result<OpResult, OrchestratorError> {
        if op.session.trim().is_empty() {
            return Err(OrchestratorError::InvalidOp("session must not be empty".into()));
        }
        let content = if op.content.trim().is_empty() && !op.media.is_empty() {
            let mut parts = Vec::with_capacity(op.media.len());
            for m in &op.media {
                parts.push(self.ingestor.describe_registered(m)?.text);
            }
            parts.join("\n")
        } else {
            op.content
        };
        let kind = op.kind.unwrap_or_else(|| self.classifier.classify(&content));
        let turn = op.turn.unwrap_or_else(|| self.next_turn(&op.session));
        let id = self.store.put_chunk(NewChunk {
            content: content.clone(),
            session_id: op.session.clone(),
            turn_index: turn,
            media: op.media,
            kind_hint: Some(kind),
        })?;
        let capacity = self.config.stm.capacity;
        let window = self
            .stm
            .entry(op.session.clone())
            .or_insert_with(|| StmWindow::new(capacity).expect("capacity validated"));
        let evicted = window.push(Turn {
            chunk_id: id.clone(),
            query_text: content,
            timestamp: self.clock.now(),
        })?;
        self.sched.pending.insert(id.clone());
        Ok(OpResult::Added {
            chunk: id,
            session: op.session,
            turn,
            kind,
            stm_evicted: evicted.map(|t| t.chunk_id),
        })
    }

    fn resolve_chunk(&self, sequence: u64) -> Result<ChunkId, OrchestratorError> {
        self.store
            .id_for(sequence)
            .ok_or_else(|| ChunkError::NotFound(format!("c{sequence}")).into())
    }

    fn update(&mut self, sequence: u64, content: String) -> Result<OpResult, OrchestratorError> {
        let old = self.resolve_chunk(sequence)?;
        let new = self.store.supersede(&old, content)?;
        let repair = self.graph.repair_chunk(&old);
        let chunk = self.store.get_chunk(&new)?;
        for w in self.stm.values_mut() {
            w.replace(
                &old,
                Turn {
                    chunk_id: new.clone(),
                    query_text: chunk.content.clone(),
                    timestamp: chunk.created_at,
                },
            );
        }
        self.sched.pending.remove(&old);
        self.sched.pending.insert(new.clone());
        Ok(OpResult::Updated { old, new, repair })
    }

    fn delete(&mut self, target: DeleteTarget) -> Result<OpResult, OrchestratorError> {
        match target {
            DeleteTarget::Chunk(sequence) => {
                let id = self.resolve_chunk(sequence)?;
                self.store.tombstone(&id, &self.graph)?;
                let repair = self.graph.repair_chunk(&id);
                self.sched.pending.remove(&id);
                for w in self.stm.values_mut() {
                    w.remove(&id);
                }
                Ok(OpResult::Deleted {
                    chunk: Some(id),
                    entity: None,
                    repair,
                })
            }
            DeleteTarget::Entity(eid) => {
                let repair = self.graph.remove_entity(eid)?;
                Ok(OpResult::Deleted {
                    chunk: None,
                    entity: Some(eid),
                    repair,
                })
            }
        }
    }

    /// Picks the memory path for a query.
    pub fn route(
        &self,
        query: &str,
        session: Option<&str>,
        domain: Option<&str>,
        hint: Option<RoutePath>,
    ) -> RoutingDecision {
        if let Some(path) = hint {
            return RoutingDecision {
                path,
                reason: "hint override".into(),
            };
        }
        if let Some((name, focal)) = focal_entity(query) {
            if let Some(s) = self.stm_sessions(session).find(|(_, w)| {
                let have: BTreeSet<String> = tokens(&w.window_text()).into_iter().collect();
                focal.is_subset(&have)
            }) {
                return RoutingDecision {
                    path: RoutePath::StmHit,
                    reason: format!("focal entity {name:?} is in the short-term window of session {:?}", s.0),
                };
            }
        }
        if self.parametric.is_some() {
            if let (Some(d), Some(m)) = (domain.filter(|d| !d.is_empty()), self.ledger.latest_manifest()) {
                if m.domain_tag == d {
                    return RoutingDecision {
                        path: RoutePath::Parametric,
                        reason: format!("domain {d:?} matches export round {}", m.round),
                    };
                }
            }
        }
        RoutingDecision {
            path: RoutePath::LtmRetrieval,
            reason: "not answerable from short-term memory and no parametric domain match".into(),
        }
    }

    fn stm_sessions<'a>(&'a self, session: Option<&'a str>) -> impl Iterator<Item = (&'a String, &'a StmWindow)> + 'a {
        self.stm
            .iter()
            .filter(move |(s, _)| session.is_none_or(|want| want == s.as_str()))
    }

    fn retrieve(&mut self, op: RetrieveOp) -> Result<Answer, OrchestratorError> {
        if op.query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery.into());
        }
        let decision = self.route(&op.query, op.session.as_deref(), op.domain.as_deref(), op.path_hint);
        match decision.path {
            RoutePath::StmHit => {
                let focal = focal_entity(&op.query).map(|f| f.1).unwrap_or_default();
                let mut hits = Vec::new();
                for (_, w) in self.stm_sessions(op.session.as_deref()) {
                    for t in w.turns() {
                        let toks: BTreeSet<String> = tokens(&t.query_text).into_iter().collect();
                        if focal.is_empty() || !toks.is_disjoint(&focal) {
                            hits.push(t);
                        }
                    }
                }
                Ok(Answer {
                    context: hits
                        .iter()
                        .map(|t| t.query_text.as_str())
                        .collect::<Vec<_>>()
                        .join("\n"),
                    stm_turns: hits.iter().map(|t| t.chunk_id.clone()).collect(),
                    decision,
                    accesses: 0,
                    retrieval: None,
                    parametric: None,
                    trace: None,
                })
            }
            RoutePath::Parametric => {
                let client = self
                    .parametric
                    .as_ref()
                    .ok_or_else(|| ParametricError::EndpointUnavailable("no parametric endpoint registered".into()))?;
                let prompt = format_prompt(&op.query, op.choices.as_deref())?;
                let reply = client.generate(&prompt)?;
                let current = self.ledger.latest_manifest().map(|m| m.round).unwrap_or(0);
                Ok(Answer {
                    context: reply.text.clone(),
                    decision,
                    accesses: 0,
                    stm_turns: Vec::new(),
                    retrieval: None,
                    parametric: Some(ParametricAnswer {
                        staleness_rounds: current.saturating_sub(reply.trained_round),
                        text: reply.text,
                        trained_round: reply.trained_round,
                    }),
                    trace: None,
                })
            }
            RoutePath::LtmRetrieval => {
                if !self.retriever.is_current(&self.graph) {
                    self.retriever.rebuild(&self.graph);
                }
                let params = op.params.clone().unwrap_or_else(|| self.config.retrieval_params());
                let result = self.retriever.retrieve(&self.graph, &self.store, &op.query, &params)?;
                let now = self.clock.now();
                self.graph.touch(&result.activated(), now);
                let trace = self.ledger.record_trace(&op.query, op.choices.clone(), &result, now);
                Ok(Answer {
                    context: result.context.clone(),
                    accesses: result.accesses,
                    decision,
                    stm_turns: Vec::new(),
                    retrieval: Some(result),
                    parametric: None,
                    trace: Some(trace),
                })
            }
        }
    }

    /// Scheduled actions due at `now`, in execution order.
    pub fn tick(&self, now: Timestamp) -> Vec<Action> {
        let cfg = &self.config.orchestrator;
        let elapsed = |since: Timestamp, period_s: u64| now.saturating_since(since) >= Duration::from_secs(period_s);
        let mut due = Vec::new();
        let n = self.sched.pending.len();
        if n > 0
            && (n >= cfg.consolidation_threshold || elapsed(self.sched.last_consolidation, cfg.consolidation_period_s))
        {
            due.push(Action::Consolidate);
        }
        if elapsed(self.sched.last_prune, cfg.prune_period_s) {
            due.push(Action::Prune);
        }
        if elapsed(self.sched.last_distill, cfg.distill_period_s) && self.ledger.pending().len() >= cfg.min_pairs.max(1)
        {
            due.push(Action::DistillExport);
        }
        due
    }

    pub fn execute(&mut self, action: Action) -> Result<ActionReport, OrchestratorError> {
        match action {
            Action::Consolidate => self.consolidate(),
            Action::Prune => self.prune().map(ActionReport::Pruned),
            Action::DistillExport => self
                .export(None, None)
                .map(|(path, manifest)| ActionReport::Exported { path, manifest }),
        }
    }

    /// Runs every due action; failures are reported individually.
    pub fn maintain(&mut self) -> Vec<ActionReport> {
        let now = self.clock.now();
        self.tick(now)
            .into_iter()
            .map(|a| {
                self.execute(a).unwrap_or_else(|e| {
                    tracing::warn!(action = ?a, error = %e, "scheduled action failed");
                    ActionReport::Failed {
                        failed: a,
                        error: e.to_string(),
                    }
                })
            })
            .collect()
    }

    /// Extracts every pending chunk into the graph. Extraction runs for all
    /// batches before anything is merged, so a failure leaves the queue and
    /// the graph untouched.
    pub fn consolidate(&mut self) -> Result<ActionReport, OrchestratorError> {
        let now = self.clock.now();
        let ids: Vec<ChunkId> = self.sched.pending.iter().cloned().collect();
        let mut chunks = Vec::with_capacity(ids.len());
        for id in &ids {
            match self.store.get_chunk(id) {
                Ok(c) => chunks.push(c),
                Err(ChunkError::NotFound(_) | ChunkError::Tombstoned { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let mut results = Vec::new();
        for batch in chunks.chunks(self.config.orchestrator.batch_size) {
            results.push(extract(batch, self.extractor.as_ref())?);
        }
        let mut delta = GraphDelta::default();
        for r in &results {
            sum_delta(&mut delta, self.graph.merge_extraction(r, &self.store, now)?);
        }
        let mut unreferenced = 0;
        for c in &chunks {
            self.sched.processed.insert(c.id.sequence);
            if crate::chunk_store::ProvenanceIndex::reference_count(&self.graph, &c.id) == 0 {
                unreferenced += 1;
            }
        }
        for id in &ids {
            self.sched.pending.remove(id);
        }
        self.sched.last_consolidation = now;
        self.retriever.rebuild(&self.graph);
        tracing::debug!(
            chunks = chunks.len(),
            entities = self.graph.entity_count(),
            "consolidated"
        );
        Ok(ActionReport::Consolidated {
            chunks: chunks.len(),
            unreferenced,
            delta,
        })
    }

    pub fn prune(&mut self) -> Result<PruneReport, OrchestratorError> {
        let now = self.clock.now();
        let report = self.graph.prune(&self.config.prune_budget(), now)?;
        self.sched.last_prune = now;
        if !report.is_empty() {
            self.retriever.rebuild(&self.graph);
        }
        Ok(report)
    }

    /// Exports the current round. Without `path` the file goes to
    /// `<store>/exports/round-NNNN.jsonl`.
    pub fn export(
        &mut self,
        path: Option<PathBuf>,
        domain_tag: Option<String>,
    ) -> Result<(PathBuf, ExportManifest), OrchestratorError> {
        let path = match (path, &self.dir) {
            (Some(p), _) => p,
            (None, Some(dir)) => dir
                .join(EXPORT_DIR)
                .join(format!("round-{:04}.jsonl", self.ledger.current_round())),
            (None, None) => {
                return Err(OrchestratorError::InvalidOp(
                    "export path required for an in-memory store".into(),
                ))
            }
        };
        let now = self.clock.now();
        let tag = domain_tag.unwrap_or_else(|| self.config.orchestrator.domain_tag.clone());
        let manifest = self
            .ledger
            .export_round(&path, &self.graph.snapshot_digest(), &tag, now)?;
        self.sched.last_distill = now;
        Ok((path, manifest))
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            chunks_live: self.store.live_count(),
            chunks_total: self.store.total_count(),
            pending: self.sched.pending.len(),
            sessions: self.stm.len(),
            stm_turns: self.stm.values().map(StmWindow::len).sum(),
            graph: self.graph.stats(),
            current_round: self.ledger.current_round(),
            traces_pending: self.ledger.pending().len(),
            traces_skipped: self.ledger.skipped(),
            exported_pairs: self.ledger.exported_pairs(),
        }
    }

    /// Serialized controller state (scheduler, windows, ledger).
    pub fn state_bytes(&self) -> Vec<u8> {
        let st = PersistedState {
            format: STATE_FORMAT.into(),
            scheduler: self.sched.clone(),
            stm: self.stm.clone(),
            ledger: self.ledger.clone(),
        };
        let mut out = serde_json::to_vec_pretty(&st).expect("state serializes");
        out.push(b'\n');
        out
    }

    /// Flushes the chunk log and writes the graph snapshot and controller
    /// state. A no-op for in-memory engines.
    pub fn save(&self) -> Result<(), OrchestratorError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        self.store.flush()?;
        self.graph.snapshot(&dir.join(GRAPH_FILE))?;
        write_atomic(&dir.join(STATE_FILE), &self.state_bytes())?;
        Ok(())
    }
}
