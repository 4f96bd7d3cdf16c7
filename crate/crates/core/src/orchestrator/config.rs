//! Engine configuration.
//!
//! The file format is TOML; every key is optional and dotted keys map onto
//! the sections below, e.g.
//!
//! ```toml
//! stm.capacity = 10
//! orchestrator.consolidation_threshold = 20
//! retrieval.hops = 2
//! prune.max_entities = 10000
//! classify.core_lexicon = "lexicon.txt"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::extractor::DEFAULT_COMPRESSION_BUDGET;
use crate::kind::MemoryKind;
use crate::ltm_graph::{GraphConfig, PruneBudget};
use crate::retrieval::{RetrievalConfig, RetrievalParams};
use crate::stm::DEFAULT_CAPACITY;

use super::OrchestratorError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemverseConfig {
    pub stm: StmSection,
    pub orchestrator: SchedulerSection,
    pub retrieval: RetrievalSection,
    pub prune: PruneSection,
    pub classify: ClassifySection,
    pub extractor: ExtractorSection,
    pub parametric: ParametricSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StmSection {
    pub capacity: usize,
}

impl Default for StmSection {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub consolidation_threshold: usize,
    pub consolidation_period_s: u64,
    pub prune_period_s: u64,
    pub distill_period_s: u64,
    /// Minimum recorded traces before a scheduled export fires.
    pub min_pairs: usize,
    /// Chunks per extraction call during consolidation.
    pub batch_size: usize,
    /// Tag written into export manifests; parametric routing requires a match.
    pub domain_tag: String,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            consolidation_threshold: 20,
            consolidation_period_s: 600,
            prune_period_s: 86_400,
            distill_period_s: 86_400,
            min_pairs: 1,
            batch_size: 16,
            domain_tag: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub top_m: usize,
    pub hops: u32,
    pub context_budget: usize,
    pub alpha: f64,
    pub beta: f64,
    pub min_score: f64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let p = RetrievalParams::default();
        let c = RetrievalConfig::default();
        Self {
            top_m: p.top_m,
            hops: p.hop_limit,
            context_budget: p.context_budget,
            alpha: c.alpha,
            beta: c.beta,
            min_score: c.min_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub max_entities: usize,
    pub max_relations: usize,
    pub lambda_per_day: f64,
    pub min_salience: f64,
    pub protected_kinds: Vec<MemoryKind>,
}

impl Default for PruneSection {
    fn default() -> Self {
        let b = PruneBudget::default();
        Self {
            max_entities: b.max_entities,
            max_relations: b.max_relations,
            lambda_per_day: GraphConfig::default().decay_lambda_per_day,
            min_salience: b.min_salience,
            protected_kinds: b.protected_kinds.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// One phrase per line; replaces the built-in core lexicon.
    pub core_lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    /// Remote extraction service; the rule extractor is used when unset.
    pub endpoint: Option<String>,
    pub model: String,
    pub compression_budget: usize,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "extractor".into(),
            compression_budget: DEFAULT_COMPRESSION_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParametricSection {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for ParametricSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: 30_000,
        }
    }
}

impl MemverseConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, OrchestratorError> {
        let cfg: Self = toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`; relative lexicon paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(lex), Some(dir)) = (&cfg.classify.core_lexicon, path.parent()) {
            if lex.is_relative() {
                cfg.classify.core_lexicon = Some(dir.join(lex));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.stm.capacity == 0 {
            return bad("stm.capacity must be at least 1");
        }
        if self.orchestrator.consolidation_threshold == 0 {
            return bad("orchestrator.consolidation_threshold must be at least 1");
        }
        if self.orchestrator.batch_size == 0 {
            return bad("orchestrator.batch_size must be at least 1");
        }
        if self.retrieval.top_m == 0 || self.retrieval.hops == 0 {
            return bad("retrieval.top_m and retrieval.hops must be at least 1");
        }
        if self.prune.max_entities == 0 || self.prune.max_relations == 0 {
            return bad("prune budgets must be at least 1");
        }
        if self.prune.lambda_per_day.is_nan() || self.prune.lambda_per_day < 0.0 {
            return bad("prune.lambda_per_day must be non-negative");
        }
        Ok(())
    }

    pub fn retrieval_params(&self) -> RetrievalParams {
        RetrievalParams {
            top_m: self.retrieval.top_m,
            hop_limit: self.retrieval.hops,
            context_budget: self.retrieval.context_budget,
            kinds: MemoryKind::all(),
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            alpha: self.retrieval.alpha,
            beta: self.retrieval.beta,
            min_score: self.retrieval.min_score,
            ..RetrievalConfig::default()
        }
    }

    pub fn prune_budget(&self) -> PruneBudget {
        PruneBudget {
            max_entities: self.prune.max_entities,
            max_relations: self.prune.max_relations,
            min_salience: self.prune.min_salience,
            protected_kinds: self.prune.protected_kinds.iter().copied().collect(),
        }
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            decay_lambda_per_day: self.prune.lambda_per_day,
            ..GraphConfig::default()
        }
    }
}
