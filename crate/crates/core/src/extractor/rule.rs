//! Deterministic pattern extractor.
//!
//! Grammar: text is split into sentences on `.`, `!` and `?`. Within a
//! sentence, maximal runs of capitalized tokens are entity candidates and the
//! run of other tokens between two candidates is the relation label.
//! Candidates with no neighbour are kept as isolated entities. A comma, colon
//! or semicolon closes an entity run. Sentence-initial function words
//! ("The", "My", "We", ...) never count as capitalized.

use std::sync::Arc;

use crate::chunk_store::Chunk;
use crate::kind::MemoryKind;
use crate::text::truncate_chars;

use super::{
    ExtractError, ExtractionResult, ExtractorBackend, ResultBuilder, DEFAULT_COMPRESSION_BUDGET, UNKNOWN_TYPE,
};

const FUNCTION_WORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "i",
    "me",
    "my",
    "mine",
    "we",
    "us",
    "our",
    "ours",
    "you",
    "your",
    "yours",
    "he",
    "him",
    "his",
    "she",
    "her",
    "hers",
    "it",
    "its",
    "they",
    "them",
    "their",
    "this",
    "that",
    "these",
    "those",
    "what",
    "when",
    "where",
    "who",
    "whom",
    "whose",
    "which",
    "why",
    "how",
    "yesterday",
    "today",
    "tomorrow",
    "tonight",
    "there",
    "here",
    "then",
    "and",
    "but",
    "or",
    "so",
    "if",
    "yes",
    "no",
    "please",
    "do",
    "does",
    "did",
    "is",
    "are",
    "was",
    "were",
    "can",
    "could",
    "will",
    "would",
    "should",
    "let",
    "also",
    "after",
    "before",
    "on",
    "in",
    "at",
    "last",
    "next",
    "every",
    "some",
    "all",
    "maybe",
    "hi",
    "hello",
    "thanks",
    "ok",
];

const COPULAS: &[&str] = &["is", "are", "was", "were", "be", "been", "being", "am"];

pub const PERSON_TYPE: &str = "person";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceParse {
    /// Display forms of entity candidates, in order of appearance.
    pub entities: Vec<String>,
    /// (subject index, label, object index) into `entities`.
    pub triples: Vec<(usize, String, usize)>,
}

#[derive(Debug)]
enum Segment {
    Entity { words: Vec<String>, closed: bool },
    Label(Vec<String>),
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase) && !FUNCTION_WORDS.contains(&word.to_lowercase().as_str())
}

fn trim_token(raw: &str) -> &str {
    raw.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Parses one sentence.
pub fn rule_parse(sentence: &str) -> SentenceParse {
    let mut segments: Vec<Segment> = Vec::new();
    for raw in sentence.split_whitespace() {
        let word = trim_token(raw);
        let closes = raw.ends_with([',', ';', ':']);
        if word.is_empty() {
            if closes {
                if let Some(Segment::Entity { closed, .. }) = segments.last_mut() {
                    *closed = true;
                }
            }
            continue;
        }
        if is_capitalized(word) {
            match segments.last_mut() {
                Some(Segment::Entity { words, closed: false }) => words.push(word.to_string()),
                _ => segments.push(Segment::Entity {
                    words: vec![word.to_string()],
                    closed: false,
                }),
            }
            if closes {
                if let Some(Segment::Entity { closed, .. }) = segments.last_mut() {
                    *closed = true;
                }
            }
        } else {
            match segments.last_mut() {
                Some(Segment::Label(words)) => words.push(word.to_lowercase()),
                _ => segments.push(Segment::Label(vec![word.to_lowercase()])),
            }
        }
    }

    let mut entities = Vec::new();
    let mut seg_to_entity = Vec::with_capacity(segments.len());
    for s in &segments {
        match s {
            Segment::Entity { words, .. } => {
                seg_to_entity.push(Some(entities.len()));
                entities.push(words.join(" "));
            }
            Segment::Label(_) => seg_to_entity.push(None),
        }
    }
    let mut triples = Vec::new();
    for i in 0..segments.len().saturating_sub(2) {
        if let (Some(src), Segment::Label(label), Some(dst)) =
            (seg_to_entity[i], &segments[i + 1], seg_to_entity[i + 2])
        {
            triples.push((src, label.join(" "), dst));
        }
    }
    SentenceParse { entities, triples }
}

pub fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', '!', '?']).map(str::trim).filter(|s| !s.is_empty())
}

fn is_copular(label: &str) -> bool {
    label.split_whitespace().next().is_some_and(|w| COPULAS.contains(&w))
}

#[derive(Debug, Clone)]
pub struct RuleExtractor {
    pub compression_budget: usize,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        Self {
            compression_budget: DEFAULT_COMPRESSION_BUDGET,
        }
    }
}

impl RuleExtractor {
    pub fn new(compression_budget: usize) -> Self {
        Self { compression_budget }
    }

    fn run(&self, chunks: &[Arc<Chunk>]) -> (ResultBuilder, Vec<String>) {
        let mut b = ResultBuilder::default();
        let mut triple_sentences: Vec<String> = Vec::new();
        for chunk in chunks {
            let kind = chunk.kind_hint.unwrap_or(MemoryKind::Episodic);
            for sentence in sentences(&chunk.content) {
                let parse = rule_parse(sentence);
                let mut is_agent = vec![false; parse.entities.len()];
                for (s, label, _) in &parse.triples {
                    if !is_copular(label) {
                        is_agent[*s] = true;
                    }
                }
                let keys: Vec<String> = parse
                    .entities
                    .iter()
                    .zip(&is_agent)
                    .map(|(name, &agent)| {
                        let etype = if agent { PERSON_TYPE } else { UNKNOWN_TYPE };
                        b.entity(name, etype, kind, &chunk.id)
                    })
                    .collect();
                for (s, label, d) in &parse.triples {
                    b.relation(&keys[*s], &keys[*d], label, kind, &chunk.id);
                    let line = format!("{} {} {}.", parse.entities[*s], label, parse.entities[*d]);
                    if !triple_sentences.contains(&line) {
                        triple_sentences.push(line);
                    }
                }
            }
        }
        (b, triple_sentences)
    }

    fn describe(&self, chunks: &[Arc<Chunk>], triple_sentences: &[String]) -> String {
        let full = if triple_sentences.is_empty() {
            chunks.iter().map(|c| c.content.as_str()).collect::<Vec<_>>().join("\n")
        } else {
            triple_sentences.join(" ")
        };
        truncate_chars(&full, self.compression_budget).to_string()
    }
}

impl ExtractorBackend for RuleExtractor {
    fn name(&self) -> &str {
        "rule"
    }

    fn extract(&self, chunks: &[Arc<Chunk>]) -> Result<ExtractionResult, ExtractError> {
        if chunks.is_empty() {
            return Err(ExtractError::EmptyInput);
        }
        let (b, triples) = self.run(chunks);
        let description = self.describe(chunks, &triples);
        Ok(b.finish(description))
    }

    fn compress(&self, chunks: &[Arc<Chunk>]) -> Result<String, ExtractError> {
        if chunks.is_empty() {
            return Err(ExtractError::EmptyInput);
        }
        let (_, triples) = self.run(chunks);
        Ok(self.describe(chunks, &triples))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::chunk_store::ChunkId;
    use crate::clock::Timestamp;
    use crate::extractor::{compress, extract};

    fn chunk(seq: u64, text: &str) -> Arc<Chunk> {
        Arc::new(Chunk {
            id: ChunkId {
                sequence: seq,
                digest: format!("{seq:064}"),
            },
            content: text.into(),
            session_id: "s".into(),
            turn_index: seq,
            created_at: Timestamp(0),
            media: vec![],
            kind_hint: None,
            supersedes: None,
        })
    }

    /// Standalone SVO oracle for single-clause sentences of the form
    /// `Name verb-words Name`: first and last capitalized words are the
    /// endpoints, everything in between is the label.
    fn svo_oracle(sentence: &str) -> Option<(String, String, String)> {
        let words: Vec<&str> = sentence.trim_end_matches(['.', '!', '?']).split(' ').collect();
        let first = *words.first()?;
        let last = *words.last()?;
        if words.len() < 3 || !first.starts_with(char::is_uppercase) || !last.starts_with(char::is_uppercase) {
            return None;
        }
        Some((first.into(), words[1..words.len() - 1].join(" "), last.into()))
    }

    #[test]
    fn subject_verb_object() {
        let c = chunk(0, "Alice adopted Milo");
        let r = extract(std::slice::from_ref(&c), &RuleExtractor::default()).unwrap();
        let (s, l, o) = svo_oracle("Alice adopted Milo").unwrap();

        let alice = r.entity(&s).unwrap();
        assert_eq!(alice.etype, "person");
        let milo = r.entity(&o).unwrap();
        assert_eq!(milo.etype, "unknown");
        assert_eq!(r.entities.len(), 2);
        assert_eq!(r.relations.len(), 1);
        let rel = &r.relations[0];
        assert_eq!(
            (rel.src_name.as_str(), rel.label.as_str(), rel.dst_name.as_str()),
            ("alice", l.as_str(), "milo")
        );
        let just_c: BTreeSet<ChunkId> = [c.id.clone()].into_iter().collect();
        for sources in [&alice.source_chunks, &milo.source_chunks, &rel.source_chunks] {
            assert_eq!(sources, &just_c);
        }
        assert!(alice.kinds.contains(&MemoryKind::Episodic));
    }

    #[test]
    fn no_capitalized_tokens_means_no_graph() {
        let c = chunk(0, "it rained yesterday");
        let r = extract(&[c], &RuleExtractor::default()).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.description, "it rained yesterday");
    }

    #[test]
    fn svo_matches_oracle_on_synthetic_facts() {
        let ex = RuleExtractor::default();
        for i in 0..50 {
            let text = format!("X{i} likes Y{i}");
            let r = ex.extract(&[chunk(i, &text)]).unwrap();
            let (s, l, o) = svo_oracle(&text).unwrap();
            assert_eq!(r.relations.len(), 1);
            assert_eq!(r.relations[0].src_name, s.to_lowercase());
            assert_eq!(r.relations[0].label, l);
            assert_eq!(r.relations[0].dst_name, o.to_lowercase());
        }
    }

    #[test]
    fn multiword_names_labels_and_breaks() {
        let p = rule_parse("Yesterday Alice Smith visited New York with Bob");
        assert_eq!(p.entities, vec!["Alice Smith", "New York", "Bob"]);
        assert_eq!(
            p.triples,
            vec![(0, "visited".to_string(), 1), (1, "with".to_string(), 2)]
        );
        let p = rule_parse("Paris, France");
        assert_eq!(p.entities, vec!["Paris", "France"]);
        assert!(p.triples.is_empty());
        let p = rule_parse("My name is Alice");
        assert_eq!(p.entities, vec!["Alice"]);
    }

    #[test]
    fn copular_subjects_are_not_persons() {
        let r = RuleExtractor::default()
            .extract(&[chunk(0, "Paris is the capital of France.")])
            .unwrap();
        assert_eq!(r.entity("Paris").unwrap().etype, "unknown");
        assert_eq!(r.relations[0].label, "is the capital of");
    }

    #[test]
    fn entities_merge_across_chunks() {
        let a = chunk(0, "Alice adopted Milo.");
        let b = chunk(1, "Alice met Bob!");
        let r = RuleExtractor::default().extract(&[a.clone(), b.clone()]).unwrap();
        let alice = r.entity("alice").unwrap();
        assert_eq!(alice.source_chunks, [a.id.clone(), b.id.clone()].into_iter().collect());
        assert_eq!(r.relations.len(), 2);
    }

    #[test]
    fn compression() {
        let ex = RuleExtractor::default();
        let d = compress(&[chunk(0, "Alice adopted Milo")], &ex).unwrap();
        assert!(d.contains("Alice adopted Milo"));
        let d = compress(&[chunk(0, "it rained"), chunk(1, "then sun")], &ex).unwrap();
        assert_eq!(d, "it rained\nthen sun");
        assert!(matches!(compress(&[], &ex), Err(ExtractError::EmptyInput)));
        let tight = RuleExtractor::new(5);
        assert_eq!(compress(&[chunk(0, "Alice adopted Milo")], &tight).unwrap(), "Alice");
    }

    #[test]
    fn idempotent() {
        let cs = vec![
            chunk(0, "Alice adopted Milo. Milo chased Rex."),
            chunk(1, "Bob lives in Oslo"),
        ];
        let ex = RuleExtractor::default();
        assert_eq!(ex.extract(&cs).unwrap(), ex.extract(&cs).unwrap());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(
            extract(&[], &RuleExtractor::default()),
            Err(ExtractError::EmptyInput)
        ));
    }
}
