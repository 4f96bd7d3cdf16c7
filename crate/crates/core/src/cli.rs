//! Command-line front end used by the `memverse` binary.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use crate::chunk_store::{MediaRef, Modality};
use crate::clock::Clock;
use crate::orchestrator::{
    ActionReport, AddOp, MemoryOp, MemverseConfig, OpResult, Orchestrator, OrchestratorError, RoutePath,
};
use crate::service::{self, apply_mutation, retrieve_op, Envelope, QueryParams, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "memverse", version, about = "Agent memory engine")]
pub struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "MEMVERSE_STORE_DIR", default_value = ".memverse")]
    pub store: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true, env = "MEMVERSE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    /// One JSON envelope per line.
    Records,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add a file or media URI as one turn.
    Ingest {
        source: String,
        /// Guessed from the extension when omitted.
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long, default_value = "default")]
        session: String,
        #[arg(long)]
        turn: Option<u64>,
    },
    /// Answer a query through the routed memory path.
    Ask {
        query: String,
        /// Force a path: stm, ltm or parametric.
        #[arg(long)]
        path: Option<RoutePath>,
        /// Comma-separated answer choices.
        #[arg(long)]
        choices: Option<String>,
        #[arg(long)]
        session: Option<String>,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        hops: Option<u32>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        top_m: Option<usize>,
        /// Comma-separated kinds filter.
        #[arg(long)]
        kinds: Option<String>,
    },
    /// Add every `session<TAB>turn<TAB>text` line of a transcript.
    Replay {
        transcript: PathBuf,
    },
    Consolidate,
    Prune,
    /// Export the current distillation round.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        domain: Option<String>,
    },
    Stats,
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
        /// Parametric memory endpoint.
        #[arg(long, env = "MEMVERSE_PARAMETRIC")]
        parametric: Option<String>,
        /// Milliseconds between scheduler checks.
        #[arg(long, default_value_t = 1000)]
        tick_ms: u64,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] OrchestratorError),
    #[error(transparent)]
    Service(#[from] service::ServiceError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn guess_modality(source: &str) -> Modality {
    let ext = Path::new(source)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" | "jpg" | "jpeg" | "gif" | "webp" | "bmp" => Modality::Image,
        "wav" | "mp3" | "flac" | "ogg" | "m4a" => Modality::Audio,
        "mp4" | "mov" | "mkv" | "webm" | "avi" => Modality::Video,
        _ => Modality::Text,
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write, clock: Arc<dyn Clock>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match run(cli, out, clock) {
        Ok(()) => 0,
        Err(CliError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<MemverseConfig, OrchestratorError> {
    match path {
        Some(p) => MemverseConfig::load(p),
        None => Ok(MemverseConfig::default()),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, clock: Arc<dyn Clock>) -> Result<(), CliError> {
    if let Command::Serve {
        listen,
        parametric,
        tick_ms,
    } = cli.command
    {
        let config = ServiceConfig {
            listen_addr: listen,
            store_dir: cli.store,
            config_path: cli.config,
            parametric_endpoint: parametric,
            tick_interval: Duration::from_millis(tick_ms.max(1)),
        };
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(service::serve(config, clock))?;
        return Ok(());
    }

    let config = load_config(cli.config.as_deref())?;
    let mut engine = Orchestrator::open(&cli.store, config, clock)?;
    let format = cli.format;
    match cli.command {
        Command::Ingest {
            source,
            modality,
            session,
            turn,
        } => {
            let modality = modality.unwrap_or_else(|| guess_modality(&source));
            let op = match (modality, std::fs::read_to_string(&source)) {
                (Modality::Text, Ok(text)) if !text.trim().is_empty() => AddOp {
                    turn,
                    ..AddOp::text(text.trim_end(), session)
                },
                _ => AddOp {
                    content: String::new(),
                    media: vec![MediaRef::new(source, modality)],
                    session,
                    turn,
                    kind: None,
                },
            };
            let r = apply_mutation(&mut engine, MemoryOp::Add(op))?;
            emit_result(out, format, &r)?;
        }
        Command::Ask {
            query,
            path,
            choices,
            session,
            domain,
            hops,
            budget,
            top_m,
            kinds,
        } => {
            let params = QueryParams {
                q: Some(query),
                hops,
                budget,
                top_m,
                kinds,
                path: None,
                session,
                domain,
                choices,
            };
            let mut op = retrieve_op(engine.config(), params).map_err(CliError::Usage)?;
            op.path_hint = path;
            let r = engine.handle(MemoryOp::Retrieve(op))?;
            engine.save()?;
            emit_result(out, format, &r)?;
        }
        Command::Replay { transcript } => {
            let text = std::fs::read_to_string(&transcript)?;
            let mut added = 0usize;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                let mut fields = line.splitn(3, '\t');
                let (Some(session), Some(turn), Some(content)) = (fields.next(), fields.next(), fields.next()) else {
                    return Err(CliError::Usage(format!(
                        "{}:{}: expected session<TAB>turn<TAB>text",
                        transcript.display(),
                        n + 1
                    )));
                };
                let turn: u64 = turn
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{}:{}: bad turn {turn:?}", transcript.display(), n + 1)))?;
                let op = AddOp {
                    turn: Some(turn),
                    ..AddOp::text(content, session)
                };
                let r = apply_mutation(&mut engine, MemoryOp::Add(op))?;
                if format == Format::Records {
                    emit_result(out, format, &r)?;
                }
                added += 1;
            }
            if format == Format::Text {
                writeln!(out, "replayed {added} turns")?;
            }
        }
        Command::Consolidate => {
            let r = engine.consolidate()?;
            engine.save()?;
            emit_report(out, format, "consolidate", &r)?;
        }
        Command::Prune => {
            let r = engine.prune()?;
            engine.save()?;
            match format {
                Format::Records => emit_envelope(out, &Envelope::new("prune", &r))?,
                Format::Text => writeln!(
                    out,
                    "pruned {} entities, {} relations",
                    r.removed_entities.len(),
                    r.removed_relations.len()
                )?,
            }
        }
        Command::Export { out: path, domain } => {
            let (path, manifest) = engine.export(path, domain)?;
            engine.save()?;
            match format {
                Format::Records => emit_envelope(
                    out,
                    &Envelope::new("export", serde_json::json!({"path": path, "manifest": manifest})),
                )?,
                Format::Text => writeln!(
                    out,
                    "exported round {} ({} pairs) to {}",
                    manifest.round,
                    manifest.pair_count,
                    path.display()
                )?,
            }
        }
        Command::Stats => {
            let s = engine.stats();
            match format {
                Format::Records => emit_envelope(out, &Envelope::new("stats", &s))?,
                Format::Text => {
                    writeln!(out, "chunks: {} live, {} total", s.chunks_live, s.chunks_total)?;
                    writeln!(out, "pending consolidation: {}", s.pending)?;
                    writeln!(out, "sessions: {} ({} short-term turns)", s.sessions, s.stm_turns)?;
                    writeln!(out, "entities: {}", s.graph.entity_count)?;
                    writeln!(out, "relations: {}", s.graph.relation_count)?;
                    writeln!(
                        out,
                        "distill round: {} ({} traces pending, {} pairs exported)",
                        s.current_round, s.traces_pending, s.exported_pairs
                    )?;
                }
            }
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn emit_envelope(out: &mut dyn Write, env: &Envelope) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(env).expect("envelope serializes"))
}

fn emit_report(out: &mut dyn Write, format: Format, op: &str, r: &ActionReport) -> std::io::Result<()> {
    match (format, r) {
        (Format::Records, _) => emit_envelope(out, &Envelope::new(op, r)),
        (Format::Text, ActionReport::Consolidated { chunks, delta, .. }) => writeln!(
            out,
            "consolidated {chunks} chunks: +{} entities, +{} relations",
            delta.entities_added, delta.relations_added
        ),
        (Format::Text, other) => writeln!(out, "{other:?}"),
    }
}

fn emit_result(out: &mut dyn Write, format: Format, r: &OpResult) -> std::io::Result<()> {
    if format == Format::Records {
        return emit_envelope(out, &Envelope::from_result(r));
    }
    match r {
        OpResult::Added {
            chunk,
            session,
            turn,
            kind,
            ..
        } => writeln!(out, "added {chunk} ({session} turn {turn}, {})", kind.as_str()),
        OpResult::Updated { old, new, .. } => writeln!(out, "updated {old} -> {new}"),
        OpResult::Deleted { chunk, entity, .. } => match (chunk, entity) {
            (Some(c), _) => writeln!(out, "deleted {c}"),
            (None, Some(e)) => writeln!(out, "deleted entity {e:?}"),
            (None, None) => writeln!(out, "deleted"),
        },
        OpResult::Retrieved(a) => {
            writeln!(out, "path: {} ({})", a.decision.path.as_str(), a.decision.reason)?;
            writeln!(out, "accesses: {}", a.accesses)?;
            if let Some(p) = &a.parametric {
                writeln!(out, "answer: {}", p.text)?;
                writeln!(
                    out,
                    "trained round: {} ({} behind)",
                    p.trained_round, p.staleness_rounds
                )?;
            }
            if a.context.is_empty() {
                writeln!(out, "context: (none)")
            } else {
                writeln!(out, "context:\n{}", a.context)
            }
        }
    }
}
