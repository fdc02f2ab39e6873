//! Rule-based caption parser and ingestion of pre-parsed graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::ir::{validate_graph, Edge, TextEntity, UnlocalizedSceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternTemplate {
    /// `noun VERB PREP noun`, predicate "verb prep".
    NounVerbPrepNoun,
    /// `noun VERB noun`, predicate "verb".
    NounVerbNoun,
    /// `noun PREP noun`, predicate "prep".
    NounPrepNoun,
}

impl PatternTemplate {
    fn slots(self) -> &'static [Slot] {
        match self {
            PatternTemplate::NounVerbPrepNoun => &[Slot::Verb, Slot::Prep, Slot::Noun],
            PatternTemplate::NounVerbNoun => &[Slot::Verb, Slot::Noun],
            PatternTemplate::NounPrepNoun => &[Slot::Prep, Slot::Noun],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Verb,
    Prep,
    Noun,
}

/// Lexicon and patterns driving [`parse_caption`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserRuleSet {
    pub nouns: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
    pub prepositions: BTreeSet<String>,
    /// Tried in order; the first template that fits wins.
    pub patterns: Vec<PatternTemplate>,
    /// Dropped without breaking a phrase (articles, adjectives, ...).
    #[serde(default)]
    pub stopwords: BTreeSet<String>,
    /// Break any pattern in progress ("and", ",", ...).
    #[serde(default)]
    pub separators: BTreeSet<String>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
    /// `(suffix, replacement)` pairs for singularization, tried in order.
    #[serde(default = "default_plural_rules")]
    pub plural_rules: Vec<(String, String)>,
}

fn default_plural_rules() -> Vec<(String, String)> {
    [("ies", "y"), ("ves", "f"), ("ches", "ch"), ("shes", "sh"), ("xes", "x"), ("ses", "s"), ("s", "")]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

impl Default for ParserRuleSet {
    fn default() -> Self {
        let set = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<BTreeSet<_>>();
        ParserRuleSet {
            nouns: BTreeSet::new(),
            verbs: BTreeSet::new(),
            prepositions: set(&[
                "on", "in", "at", "under", "near", "behind", "above", "below", "beside", "with", "by", "over",
                "inside", "along", "across", "against",
            ]),
            patterns: vec![
                PatternTemplate::NounVerbPrepNoun,
                PatternTemplate::NounVerbNoun,
                PatternTemplate::NounPrepNoun,
            ],
            stopwords: set(&["a", "an", "the", "some", "two", "three", "is", "are", "of"]),
            separators: set(&["and", "or", "but", "while", ",", ";", "."]),
            synonyms: BTreeMap::new(),
            plural_rules: default_plural_rules(),
        }
    }
}

impl ParserRuleSet {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    /// Synonym canonicalization; idempotent as long as the map has no chains
    /// longer than one step, which [`ParserRuleSet::canonical`] resolves.
    pub fn canonical(&self, word: &str) -> String {
        canonicalize(&self.synonyms, word)
    }

    fn noun_lemma(&self, token: &str) -> Option<String> {
        let direct = self.canonical(token);
        if self.nouns.contains(&direct) {
            return Some(direct);
        }
        for (suffix, repl) in &self.plural_rules {
            if let Some(stem) = token.strip_suffix(suffix.as_str()) {
                if stem.is_empty() {
                    continue;
                }
                let cand = self.canonical(&format!("{stem}{repl}"));
                if self.nouns.contains(&cand) {
                    return Some(cand);
                }
            }
        }
        None
    }
}

/// Follows synonym links until a fixed point (cycles stop at the first
/// repeated word).
pub fn canonicalize(synonyms: &BTreeMap<String, String>, word: &str) -> String {
    let mut current = word.to_lowercase();
    let mut visited = BTreeSet::new();
    while let Some(next) = synonyms.get(&current) {
        if !visited.insert(current.clone()) || *next == current {
            break;
        }
        current = next.to_lowercase();
    }
    current
}

pub fn tokenize(caption: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in caption.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if matches!(ch, ',' | ';' | '.') {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq)]
enum Chunk {
    Noun(usize),
    Verb(String),
    Prep(String),
    Break,
}

/// Parses one caption into an unlocalized scene graph.
///
/// Consecutive lexicon nouns form one phrase whose head is the last noun.
/// Unknown words are treated as modifiers and skipped.
pub fn parse_caption(image_id: &str, caption: &str, rules: &ParserRuleSet) -> Result<UnlocalizedSceneGraph> {
    if caption.trim().is_empty() {
        return Err(Error::EmptyCaption);
    }
    let tokens = tokenize(caption);
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut entities: Vec<TextEntity> = Vec::new();
    for (pos, tok) in tokens.iter().enumerate() {
        if rules.separators.contains(tok) {
            chunks.push(Chunk::Break);
        } else if rules.stopwords.contains(tok) {
            continue;
        } else if let Some(lemma) = rules.noun_lemma(tok) {
            // compound noun: extend the previous phrase if it ends right here
            if let (Some(Chunk::Noun(idx)), Some(last)) = (chunks.last(), entities.last_mut()) {
                if *idx == last.entity_id && last.caption_span.map(|s| s.1) == Some(pos) {
                    let start = last.caption_span.map_or(pos, |s| s.0);
                    last.lemma = lemma;
                    last.caption_span = Some((start, pos + 1));
                    continue;
                }
            }
            let id = entities.len();
            entities.push(TextEntity::new(id, lemma, Some((pos, pos + 1))));
            chunks.push(Chunk::Noun(id));
        } else if rules.verbs.contains(tok) {
            chunks.push(Chunk::Verb(tok.clone()));
        } else if rules.prepositions.contains(tok) {
            chunks.push(Chunk::Prep(tok.clone()));
        }
    }

    let mut edges = Vec::new();
    for (k, chunk) in chunks.iter().enumerate() {
        let Chunk::Noun(subject) = *chunk else { continue };
        for template in &rules.patterns {
            if let Some((predicate, object)) = match_template(&chunks[k + 1..], template.slots()) {
                let edge = Edge::new(subject, predicate, object);
                if subject != object && !edges.contains(&edge) {
                    edges.push(edge);
                }
                break;
            }
        }
    }

    let graph = UnlocalizedSceneGraph {
        image_id: image_id.to_string(),
        entities,
        edges,
    };
    debug_assert!(validate_graph(&graph).is_empty());
    Ok(graph)
}

fn match_template(rest: &[Chunk], slots: &[Slot]) -> Option<(String, usize)> {
    if rest.len() < slots.len() {
        return None;
    }
    let mut words = Vec::new();
    for (chunk, slot) in rest.iter().zip(slots) {
        match (chunk, slot) {
            (Chunk::Verb(w), Slot::Verb) | (Chunk::Prep(w), Slot::Prep) => words.push(w.as_str()),
            (Chunk::Noun(o), Slot::Noun) => return Some((words.join(" "), *o)),
            _ => return None,
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

pub fn parse_caption_file(path: &Path, rules: &ParserRuleSet) -> Result<Vec<UnlocalizedSceneGraph>> {
    let records: Vec<CaptionRecord> = read_jsonl(path)?;
    records
        .iter()
        .map(|r| parse_caption(&r.image_id, &r.caption, rules))
        .collect()
}

/// Normalizes and validates externally parsed graphs: lemmas are lowercased
/// and mapped through `synonyms`.
pub fn normalize_parsed(
    mut graph: UnlocalizedSceneGraph,
    synonyms: &BTreeMap<String, String>,
) -> Result<UnlocalizedSceneGraph> {
    for e in &mut graph.entities {
        e.lemma = canonicalize(synonyms, e.lemma.trim());
    }
    graph.checked()
}

/// Reads a graphs JSONL file. Malformed lines fail with their line number;
/// invalid graphs fail with the violation report.
pub fn ingest_parsed_triplets(path: &Path, synonyms: &BTreeMap<String, String>) -> Result<Vec<UnlocalizedSceneGraph>> {
    let raw: Vec<UnlocalizedSceneGraph> = read_jsonl(path)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, g)| {
            normalize_parsed(g, synonyms).map_err(|e| match e {
                Error::InvalidGraph { image_id, violations } => Error::InvalidGraph {
                    image_id: format!("{image_id} (line {})", i + 1),
                    violations,
                },
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules() -> ParserRuleSet {
        let mut r = ParserRuleSet::default();
        r.nouns = ["boy", "skateboard", "man", "horse", "sky", "tennis", "racket", "bench", "dog", "leaf", "box"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        r.verbs = ["riding", "holding", "sitting", "chasing"].iter().map(|s| s.to_string()).collect();
        r
    }

    fn lemmas(g: &UnlocalizedSceneGraph) -> Vec<&str> {
        g.entities.iter().map(|e| e.lemma.as_str()).collect()
    }

    #[test]
    fn verb_pattern() {
        let g = parse_caption("1", "a young boy riding a skateboard", &rules()).unwrap();
        assert_eq!(lemmas(&g), vec!["boy", "skateboard"]);
        assert_eq!(g.edges, vec![Edge::new(0, "riding", 1)]);
        assert_eq!(g.entities[0].caption_span, Some((2, 3)));
    }

    #[test]
    fn preposition_pattern() {
        let g = parse_caption("1", "a man on a horse", &rules()).unwrap();
        assert_eq!(lemmas(&g), vec!["man", "horse"]);
        assert_eq!(g.edges, vec![Edge::new(0, "on", 1)]);
    }

    #[test]
    fn lone_noun_has_no_edges() {
        let g = parse_caption("1", "the sky", &rules()).unwrap();
        assert_eq!(lemmas(&g), vec!["sky"]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn verb_prep_pattern_has_priority() {
        let g = parse_caption("1", "A man sitting on a bench.", &rules()).unwrap();
        assert_eq!(g.edges, vec![Edge::new(0, "sitting on", 1)]);
    }

    #[test]
    fn separators_break_patterns_and_duplicates_stay_distinct() {
        let g = parse_caption("1", "a boy riding a horse and a boy holding a dog", &rules()).unwrap();
        assert_eq!(lemmas(&g), vec!["boy", "horse", "boy", "dog"]);
        assert_eq!(g.edges, vec![Edge::new(0, "riding", 1), Edge::new(2, "holding", 3)]);
        assert_ne!(g.entities[0].caption_span, g.entities[2].caption_span);
    }

    #[test]
    fn compound_nouns_take_the_last_head_and_plurals_singularize() {
        let g = parse_caption("1", "boys holding tennis rackets", &rules()).unwrap();
        assert_eq!(lemmas(&g), vec!["boy", "racket"]);
        assert_eq!(g.entities[1].caption_span, Some((2, 4)));
        let g = parse_caption("1", "leaves in boxes", &rules()).unwrap();
        assert_eq!(lemmas(&g), vec!["leaf", "box"]);
    }

    #[test]
    fn empty_caption_is_an_error_and_nounless_caption_is_empty_graph() {
        assert!(matches!(parse_caption("1", "  ", &rules()), Err(Error::EmptyCaption)));
        let g = parse_caption("1", "riding on", &rules()).unwrap();
        assert!(g.entities.is_empty() && g.edges.is_empty());
    }

    #[test]
    fn synonyms_apply_to_caption_nouns() {
        let mut r = rules();
        r.synonyms.insert("kid".into(), "boy".into());
        let g = parse_caption("1", "a kid chasing a dog", &r).unwrap();
        assert_eq!(lemmas(&g), vec!["boy", "dog"]);
    }

    #[test]
    fn rules_roundtrip_through_json() {
        let r = rules();
        let back: ParserRuleSet = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        std::fs::write(
            &p,
            concat!(
                r#"{"image_id":"a","entities":[{"lemma":"boy"},{"lemma":"skateboard"}],"edges":[[0,"riding",1]]}"#,
                "\n",
                r#"{"image_id":"b","entities":[{"lemma":"Kid"},{"lemma":"dog"}],"edges":[]}"#,
                "\n"
            ),
        )
        .unwrap();
        let syn: BTreeMap<_, _> = [("kid".to_string(), "boy".to_string())].into_iter().collect();
        let graphs = ingest_parsed_triplets(&p, &syn).unwrap();
        assert_eq!(graphs.len(), 2);
        assert_eq!(graphs[1].entities[0].lemma, "boy");

        std::fs::write(
            &p,
            r#"{"image_id":"c","entities":[{"lemma":"boy"},{"lemma":"dog"}],"edges":[[0,"near",9]]}"#,
        )
        .unwrap();
        let err = ingest_parsed_triplets(&p, &syn).unwrap_err();
        assert!(err.to_string().contains("index out of range"), "{err}");

        std::fs::write(&p, "{\"image_id\": 3}\n").unwrap();
        let err = ingest_parsed_triplets(&p, &syn).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }
}
