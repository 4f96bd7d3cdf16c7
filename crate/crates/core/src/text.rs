//! Canonicalization and tokenization shared by extraction, retrieval and routing.

use unicode_normalization::UnicodeNormalization;

/// A name reduced to its identity key, with the original spelling kept for display.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalName {
    pub key: String,
    pub display: String,
}

/// NFC-normalize, trim and collapse internal whitespace.
pub fn normalize_display(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Identity key for entity names: normalized display form, case-folded.
pub fn canonical_key(raw: &str) -> String {
    normalize_display(raw).to_lowercase()
}

pub fn canonicalize(raw: &str) -> CanonicalName {
    let display = normalize_display(raw);
    CanonicalName {
        key: display.to_lowercase(),
        display,
    }
}

/// Lowercased alphanumeric tokens, in order of appearance.
pub fn tokens(text: &str) -> Vec<String> {
    let nfc: String = text.nfc().collect();
    nfc.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Truncates to at most `max_chars` characters, on a char boundary.
pub fn truncate_chars(s: &str, max_chars: usize) -> &str {
    match s.char_indices().nth(max_chars) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}
