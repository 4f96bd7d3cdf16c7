//! Rule cascade assigning a memory kind to new chunks.
//!
//! 1. A first-person preference or identity phrase from the core lexicon
//!    ("my name is", "i prefer", ...) makes the chunk core.
//! 2. A generic copular statement ("X is a Y", "Xs are Ys") with no
//!    conversational anchor (personal pronouns, relative time words) is
//!    semantic.
//! 3. Everything else is episodic.
//!
//! Phrases match on whole tokens, so "I'm" is written `i m` in a lexicon.

use std::path::Path;

use crate::kind::MemoryKind;
use crate::text::tokens;

pub const DEFAULT_CORE_LEXICON: &[&str] = &[
    "my name is",
    "call me",
    "i prefer",
    "i live in",
    "i like",
    "i love",
    "i hate",
    "i dislike",
    "i am allergic",
    "i m allergic",
    "my favorite",
    "my favourite",
    "i work as",
    "i work at",
    "my birthday is",
];

const ANCHORS: &[&str] = &[
    "i",
    "me",
    "my",
    "we",
    "us",
    "our",
    "you",
    "your",
    "yesterday",
    "today",
    "tomorrow",
    "tonight",
    "now",
    "ago",
    "last",
    "just",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classifier {
    /// Each phrase as a space-padded token string.
    core_phrases: Vec<String>,
}

impl Default for Classifier {
    fn default() -> Self {
        Self::with_lexicon(DEFAULT_CORE_LEXICON.iter().copied())
    }
}

fn padded(text: &str) -> String {
    format!(" {} ", tokens(text).join(" "))
}

impl Classifier {
    pub fn with_lexicon<'a>(phrases: impl IntoIterator<Item = &'a str>) -> Self {
        let core_phrases = phrases
            .into_iter()
            .filter(|p| !tokens(p).is_empty())
            .map(padded)
            .collect();
        Self { core_phrases }
    }

    /// Reads one phrase per line; blank lines and `#` comments are ignored.
    pub fn from_lexicon_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::with_lexicon(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        ))
    }

    pub fn classify(&self, text: &str) -> MemoryKind {
        let toks = tokens(text);
        let flat = format!(" {} ", toks.join(" "));
        if self.core_phrases.iter().any(|p| flat.contains(p.as_str())) {
            return MemoryKind::Core;
        }
        let anchored = toks.iter().any(|t| ANCHORS.contains(&t.as_str()));
        let generic_copula = toks
            .windows(2)
            .any(|w| (w[0] == "is" || w[0] == "are") && (w[1] == "a" || w[1] == "an"))
            || toks.iter().skip(1).any(|t| t == "are");
        if generic_copula && !anchored {
            MemoryKind::Semantic
        } else {
            MemoryKind::Episodic
        }
    }
}
