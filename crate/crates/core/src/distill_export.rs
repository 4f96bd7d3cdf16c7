//! Retrieval traces turned into round-indexed supervision files.
//!
//! Every successful retrieval can be recorded as a (question, retrieved
//! context) pair. `export_round` writes the pairs recorded since the previous
//! export as one JSON object per line and a sibling `<file>.manifest` with
//! `key: value` lines, then opens the next round. A pair is exported exactly
//! once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::retrieval::RetrievalResult;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no traces recorded in round {0}")]
    NoTraces(u32),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("malformed training record on line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionPair {
    pub trace_id: String,
    pub question: String,
    pub choices: Option<Vec<String>>,
    /// The assembled retrieval context at trace time.
    pub retrieved: String,
    pub round: u32,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutcome {
    Recorded(String),
    /// Nothing was retrieved, so there is no target to learn.
    Skipped,
}

/// One line of a training file. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub prompt: String,
    pub target: String,
    pub trace_id: String,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub round: u32,
    pub pair_count: usize,
    /// Hex SHA-256 of the training file bytes.
    pub file_digest: String,
    /// Digest of the graph snapshot the traces were drawn from.
    pub source_graph_snapshot: String,
    pub created_at: Timestamp,
    pub domain_tag: String,
}

impl ExportManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "round: {}", self.round).unwrap();
        writeln!(s, "pair_count: {}", self.pair_count).unwrap();
        writeln!(s, "file_digest: {}", self.file_digest).unwrap();
        writeln!(s, "source_graph_snapshot: {}", self.source_graph_snapshot).unwrap();
        writeln!(s, "created_at: {}", self.created_at.as_millis()).unwrap();
        writeln!(s, "domain_tag: {}", self.domain_tag).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self, DistillError> {
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| DistillError::Manifest(format!("expected `key: value`, got {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| DistillError::Manifest(format!("missing field {k}")))
        };
        let num = |k: &str| -> Result<i64, DistillError> {
            get(k)?
                .parse()
                .map_err(|_| DistillError::Manifest(format!("field {k} is not an integer")))
        };
        Ok(Self {
            round: u32::try_from(num("round")?).map_err(|_| DistillError::Manifest("round out of range".into()))?,
            pair_count: usize::try_from(num("pair_count")?)
                .map_err(|_| DistillError::Manifest("pair_count out of range".into()))?,
            file_digest: get("file_digest")?,
            source_graph_snapshot: get("source_graph_snapshot")?,
            created_at: Timestamp(num("created_at")?),
            domain_tag: fields.get("domain_tag").cloned().unwrap_or_default(),
        })
    }
}

/// `Question: {q} Choices: {c1}, {c2}, ...`; the choices segment is omitted
/// when there are none.
pub fn format_prompt(question: &str, choices: Option<&[String]>) -> Result<String, DistillError> {
    if question.trim().is_empty() {
        return Err(DistillError::EmptyQuestion);
    }
    let mut out = format!("Question: {question}");
    if let Some(cs) = choices.filter(|c| !c.is_empty()) {
        out.push_str(" Choices: ");
        out.push_str(&cs.join(", "));
    }
    Ok(out)
}

pub fn manifest_path(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    file.with_file_name(name)
}

/// Trace bookkeeping across export rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillLedger {
    round: u32,
    next_trace: u64,
    pending: Vec<SupervisionPair>,
    skipped: u64,
    exported_pairs: u64,
    manifests: Vec<ExportManifest>,
}

impl Default for DistillLedger {
    fn default() -> Self {
        Self {
            round: 1,
            next_trace: 1,
            pending: Vec::new(),
            skipped: 0,
            exported_pairs: 0,
            manifests: Vec::new(),
        }
    }
}

impl DistillLedger {
    /// The round new traces are recorded into.
    pub fn current_round(&self) -> u32 {
        self.round
    }

    pub fn pending(&self) -> &[SupervisionPair] {
        &self.pending
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn exported_pairs(&self) -> u64 {
        self.exported_pairs
    }

    pub fn manifests(&self) -> &[ExportManifest] {
        &self.manifests
    }

    pub fn latest_manifest(&self) -> Option<&ExportManifest> {
        self.manifests.last()
    }

    pub fn record_trace(
        &mut self,
        question: &str,
        choices: Option<Vec<String>>,
        result: &RetrievalResult,
        now: Timestamp,
    ) -> TraceOutcome {
        if result.context.is_empty() || question.trim().is_empty() {
            self.skipped += 1;
            return TraceOutcome::Skipped;
        }
        let trace_id = format!("tr-{:06}", self.next_trace);
        self.next_trace += 1;
        self.pending.push(SupervisionPair {
            trace_id: trace_id.clone(),
            question: question.to_string(),
            choices,
            retrieved: result.context.clone(),
            round: self.round,
            created_at: now,
        });
        TraceOutcome::Recorded(trace_id)
    }

    /// Renders the pending pairs as training-file bytes.
    pub fn render_pending(&self) -> Result<Vec<u8>, DistillError> {
        let mut out = Vec::new();
        for p in &self.pending {
            let rec = TrainingRecord {
                prompt: format_prompt(&p.question, p.choices.as_deref())?,
                target: p.retrieved.clone(),
                trace_id: p.trace_id.clone(),
                round: self.round,
            };
            serde_json::to_writer(&mut out, &rec).map_err(io::Error::other)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Writes the current round's pairs to `path` and its manifest, then
    /// advances the round. Nothing changes if writing fails.
    pub fn export_round(
        &mut self,
        path: &Path,
        source_graph_snapshot: &str,
        domain_tag: &str,
        now: Timestamp,
    ) -> Result<ExportManifest, DistillError> {
        if self.pending.is_empty() {
            return Err(DistillError::NoTraces(self.round));
        }
        let bytes = self.render_pending()?;
        let manifest = ExportManifest {
            round: self.round,
            pair_count: self.pending.len(),
            file_digest: hex::encode(Sha256::digest(&bytes)),
            source_graph_snapshot: source_graph_snapshot.to_string(),
            created_at: now,
            domain_tag: domain_tag.to_string(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_atomic(path, &bytes)?;
        write_atomic(&manifest_path(path), manifest.render().as_bytes())?;

        tracing::info!(round = manifest.round, pairs = manifest.pair_count, path = %path.display(), "exported training round");
        self.exported_pairs += self.pending.len() as u64;
        self.pending.clear();
        self.round += 1;
        self.manifests.push(manifest.clone());
        Ok(manifest)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Parses a training file back into records.
pub fn load_training_file(path: &Path) -> Result<Vec<TrainingRecord>, DistillError> {
    let text = fs::read_to_string(path)?;
    parse_training_records(&text)
}

pub fn parse_training_records(text: &str) -> Result<Vec<TrainingRecord>, DistillError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DistillError::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_manifest(file: &Path) -> Result<ExportManifest, DistillError> {
    ExportManifest::parse(&fs::read_to_string(manifest_path(file))?)
}

/// Checks a training file against its manifest: digest, line count and round.
pub fn verify_export(file: &Path) -> Result<ExportManifest, DistillError> {
    let manifest = read_manifest(file)?;
    let bytes = fs::read(file)?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.file_digest {
        return Err(DistillError::Manifest(format!(
            "digest mismatch: file {digest}, manifest {}",
            manifest.file_digest
        )));
    }
    let records =
        parse_training_records(std::str::from_utf8(&bytes).map_err(|e| DistillError::Manifest(e.to_string()))?)?;
    if records.len() != manifest.pair_count {
        return Err(DistillError::Manifest(format!(
            "pair_count {} but file has {} records",
            manifest.pair_count,
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| r.round != manifest.round) {
        return Err(DistillError::Manifest(format!(
            "record {} is from round {}",
            r.trace_id, r.round
        )));
    }
    Ok(manifest)
}
