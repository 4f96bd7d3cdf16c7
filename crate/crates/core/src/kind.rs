use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Which long-term memory partition an element belongs to.
///
/// The derived ordering (core < episodic < semantic) is only used for
/// canonical serialization; retrieval priority is configured separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Core,
    Episodic,
    Semantic,
}

impl MemoryKind {
    pub const ALL: [MemoryKind; 3] = [MemoryKind::Core, MemoryKind::Episodic, MemoryKind::Semantic];

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryKind::Core => "core",
            MemoryKind::Episodic => "episodic",
            MemoryKind::Semantic => "semantic",
        }
    }

    pub fn all() -> BTreeSet<MemoryKind> {
        Self::ALL.into_iter().collect()
    }
}

impl fmt::Display for MemoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown memory kind `{0}` (expected core, episodic or semantic)")]
pub struct ParseKindError(pub String);

impl FromStr for MemoryKind {
    type Err = ParseKindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "core" => Ok(MemoryKind::Core),
            "episodic" => Ok(MemoryKind::Episodic),
            "semantic" => Ok(MemoryKind::Semantic),
            _ => Err(ParseKindError(s.to_string())),
        }
    }
}

/// Parses a comma-separated kind list such as `core,semantic`.
pub fn parse_kind_list(s: &str) -> Result<BTreeSet<MemoryKind>, ParseKindError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(MemoryKind::from_str)
        .collect()
}
