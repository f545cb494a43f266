//! Text cleaning, formula normalization, tokenization and metadata encoding.

mod formula;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{MetaSchema, Metadata};
use crate::error::{Error, Result};

pub use formula::{normalize_formula, BinOp, Formula, Func, NormalizedFormula, ParseError};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
/// Separates the two sides of a pair input.
pub const SEP: u32 = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[SEP]"];

static STYLE_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<(style|script)\b[^>]*>.*?</(style|script)\s*>").unwrap());
static TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<!--.*?-->|</?[A-Za-z][A-Za-z0-9-]*(\s[^<>]*)?/?>").unwrap());
static ENTITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"&(nbsp|amp|lt|gt|quot|#39);").unwrap());

/// Splits `text` into alternating prose and formula segments on `$`.
/// Odd-indexed segments are formulas; an unmatched trailing `$` starts prose.
fn segments(text: &str) -> Vec<(bool, &str)> {
    let parts: Vec<&str> = text.split('$').collect();
    let closed = if parts.len() % 2 == 1 {
        parts.len()
    } else {
        parts.len() - 1
    };
    let mut out: Vec<(bool, &str)> = parts[..closed]
        .iter()
        .enumerate()
        .map(|(i, p)| (i % 2 == 1, *p))
        .collect();
    if closed < parts.len() {
        out.push((false, parts[closed]));
    }
    out
}

fn strip_markup(prose: &str) -> String {
    let s = STYLE_BLOCK.replace_all(prose, " ");
    let s = TAG.replace_all(&s, " ");
    ENTITY
        .replace_all(&s, |c: &regex::Captures| match &c[1] {
            "nbsp" => " ",
            "amp" => "&",
            "lt" => "<",
            "gt" => ">",
            "quot" => "\"",
            _ => "'",
        })
        .into_owned()
}

fn drop_stop_words(prose: &str, stop_words: &HashSet<String>) -> String {
    prose
        .split_whitespace()
        .filter(|w| !stop_words.contains(&w.to_lowercase()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Strips HTML/CSS markup and stop words outside `$...$` formulas and collapses
/// whitespace. Never lengthens the input.
pub fn clean_text(raw: &str, stop_words: &HashSet<String>) -> String {
    let mut out = String::with_capacity(raw.len());
    for (is_formula, seg) in segments(raw) {
        if is_formula {
            out.push('$');
            out.push_str(&collapse_whitespace(seg));
            out.push('$');
            continue;
        }
        let stripped = strip_markup(seg);
        let kept = drop_stop_words(&stripped, stop_words);
        if kept.is_empty() {
            if !stripped.is_empty() {
                out.push(' ');
            }
            continue;
        }
        if stripped.starts_with(char::is_whitespace) {
            out.push(' ');
        }
        out.push_str(&kept);
        if stripped.ends_with(char::is_whitespace) {
            out.push(' ');
        }
    }
    collapse_whitespace(&out)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits prose into lowercase word and punctuation tokens. Decimal points
/// inside numbers are kept.
fn prose_tokens(prose: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in prose.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut cur = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let decimal_point = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if c.is_alphanumeric() || c == '_' || c == '\'' || decimal_point {
                cur.extend(c.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Cleaning, formula normalization and word splitting for exercise text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextNormalizer {
    pub stop_words: HashSet<String>,
}

impl TextNormalizer {
    pub fn new(stop_words: impl IntoIterator<Item = String>) -> Self {
        Self {
            stop_words: stop_words.into_iter().map(|w| w.to_lowercase()).collect(),
        }
    }

    /// Normalized tokens of `raw`, with each formula replaced by its canonical form.
    pub fn tokens(&self, raw: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (is_formula, seg) in segments(raw) {
            if is_formula {
                let f = normalize_formula(seg);
                out.extend(f.text.split_whitespace().map(str::to_string));
            } else {
                let prose = drop_stop_words(&strip_markup(seg), &self.stop_words);
                out.extend(prose_tokens(&prose));
            }
        }
        out
    }

    /// Canonical tokens of the formulas in `raw` only.
    pub fn formula_tokens(&self, raw: &str) -> Vec<String> {
        segments(raw)
            .into_iter()
            .filter(|(is_formula, _)| *is_formula)
            .flat_map(|(_, seg)| {
                normalize_formula(seg)
                    .text
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Normalized text: the tokens joined by single spaces.
    pub fn normalize(&self, raw: &str) -> String {
        self.tokens(raw).join(" ")
    }

    pub fn encode(&self, raw: &str, vocab: &Vocab) -> TokenSequence {
        let tokens = self.tokens(raw);
        TokenSequence {
            ids: tokens.iter().map(|t| vocab.id(t)).collect(),
            spans: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Byte ranges of each token in the text it was tokenized from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<Range<usize>>>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        Self { ids, spans: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes already-normalized text: whitespace-separated tokens, with any
/// remaining punctuation split off. Out-of-vocabulary tokens map to [`UNK`].
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    let mut offset = 0;
    for word in text.split_whitespace() {
        let start = offset + text[offset..].find(word).unwrap_or(0);
        offset = start + word.len();
        let pieces = prose_tokens(word);
        if pieces.len() == 1 {
            ids.push(vocab.id(&pieces[0]));
            spans.push(start..offset);
        } else {
            // Sub-word pieces share the span of the word they came from.
            for p in pieces {
                ids.push(vocab.id(&p));
                spans.push(start..offset);
            }
        }
    }
    TokenSequence {
        ids,
        spans: Some(spans),
    }
}

/// Token ↔ id table. Ids `0..3` are reserved for PAD, UNK and SEP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub const RESERVED: usize = RESERVED.len();

    /// Builds a vocabulary ordered by descending frequency, ties broken by token.
    pub fn build<'a, I, S>(documents: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for doc in documents {
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()).collect())
            .expect("counted tokens are unique")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid vocabulary token {t:?}")));
            }
            if RESERVED.contains(&t.as_str()) {
                return Err(Error::Validation(format!(
                    "reserved token {t:?} in vocabulary"
                )));
            }
            if ids.insert(t.clone(), (i + Self::RESERVED) as u32).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Total id count including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + Self::RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let i = id as usize;
        if i < Self::RESERVED {
            Some(RESERVED[i])
        } else {
            self.tokens.get(i - Self::RESERVED).map(String::as_str)
        }
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    /// One token per line; line `n` holds id `n + RESERVED`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// One-hot and multi-hot targets for the metadata prediction heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataTargets {
    pub exercise_type: Vec<f64>,
    pub difficulty: Vec<f64>,
    /// `1/n` at each of the `n` concept indices.
    pub concepts: Vec<f64>,
}

impl MetadataTargets {
    pub fn type_index(&self) -> usize {
        argmax(&self.exercise_type)
    }

    pub fn difficulty_index(&self) -> usize {
        argmax(&self.difficulty)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Encodes metadata against the corpus dictionaries. Difficulty level `k`
/// (1-based) sets position `k - 1` of a length-`L` one-hot vector.
pub fn encode_metadata(m: &Metadata, schema: &MetaSchema) -> Result<MetadataTargets> {
    let t = schema
        .type_index(&m.exercise_type)
        .ok_or_else(|| Error::Validation(format!("unknown exercise type {:?}", m.exercise_type)))?;
    let levels = schema.difficulty_levels as usize;
    if m.difficulty == 0 || m.difficulty as usize > levels {
        return Err(Error::Validation(format!(
            "difficulty {} outside 1..={levels}",
            m.difficulty
        )));
    }
    let mut concepts: Vec<u32> = m.knowledge_concepts.clone();
    concepts.sort_unstable();
    concepts.dedup();
    if concepts.is_empty() {
        return Err(Error::Validation("no knowledge concepts".into()));
    }
    if let Some(c) = concepts.iter().find(|&&c| c >= schema.concept_count) {
        return Err(Error::Validation(format!("unknown concept id {c}")));
    }
    let mut type_vec = vec![0.0; schema.exercise_types.len()];
    type_vec[t] = 1.0;
    let mut diff_vec = vec![0.0; levels];
    diff_vec[m.difficulty as usize - 1] = 1.0;
    let mut concept_vec = vec![0.0; schema.concept_count as usize];
    let weight = 1.0 / concepts.len() as f64;
    for c in concepts {
        concept_vec[c as usize] = weight;
    }
    Ok(MetadataTargets {
        exercise_type: type_vec,
        difficulty: diff_vec,
        concepts: concept_vec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_stops() -> HashSet<String> {
        HashSet::new()
    }

    #[test]
    fn strips_tags() {
        assert_eq!(clean_text("<b>solve</b> x", &no_stops()), "solve x");
        assert_eq!(clean_text("", &no_stops()), "");
        assert_eq!(
            clean_text("<style>p{color:red}</style><p>find&nbsp;x</p>", &no_stops()),
            "find x"
        );
    }

    #[test]
    fn removes_stop_words() {
        let stops: HashSet<String> = ["the".to_string()].into();
        assert_eq!(
            clean_text("find the value of The root", &stops),
            "find value of root"
        );
    }

    #[test]
    fn formulas_survive_cleaning() {
        assert_eq!(
            clean_text("if $x<y$ and $a > b$ then", &no_stops()),
            "if $x<y$ and $a > b$ then"
        );
    }

    #[test]
    fn normalizer_replaces_formulas() {
        let n = TextNormalizer::default();
        assert_eq!(
            n.normalize("Given <i>that</i> $\\frac{x}{2}=3$, find x."),
            "given that ( ( x / 2 ) = 3 ) , find x ."
        );
        assert_eq!(
            n.tokens("costs 2.5 yuan."),
            vec!["costs", "2.5", "yuan", "."]
        );
    }

    fn vocab(words: &[&str]) -> Vocab {
        let doc: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        Vocab::build([&doc], 1)
    }

    #[test]
    fn tokenize_known_and_unknown() {
        let v = vocab(&["solve", "x"]);
        let seq = tokenize("solve x", &v);
        assert_eq!(seq.len(), 2);
        assert!(seq.ids.iter().all(|&id| id >= Vocab::RESERVED as u32));
        assert_eq!(tokenize("solve y", &v).ids[1], UNK);
        assert_eq!(v.detokenize(&seq), vec!["solve", "x"]);
        assert_eq!(seq.spans.unwrap(), vec![0..5, 6..7]);
    }

    #[test]
    fn vocab_orders_by_frequency_then_token() {
        let v = vocab(&["b", "a", "c", "a", "b", "a"]);
        assert_eq!(v.token(3), Some("a"));
        assert_eq!(v.token(4), Some("b"));
        assert_eq!(v.token(5), Some("c"));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab(&["solve", "x", "(", "/"]);
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(Vocab::load(f.path()).unwrap(), v);
    }

    fn schema() -> MetaSchema {
        MetaSchema {
            exercise_types: vec!["choice".into(), "fill".into()],
            difficulty_levels: 5,
            concept_count: 10,
            image_dim: 4,
        }
    }

    fn meta(concepts: Vec<u32>, difficulty: u8) -> Metadata {
        Metadata {
            exercise_type: "fill".into(),
            difficulty,
            knowledge_concepts: concepts,
        }
    }

    #[test]
    fn multi_hot_concepts() {
        let t = encode_metadata(&meta(vec![3, 7], 2), &schema()).unwrap();
        let mut expected = vec![0.0; 10];
        expected[3] = 0.5;
        expected[7] = 0.5;
        assert_eq!(t.concepts, expected);
        assert_eq!(t.exercise_type, vec![0.0, 1.0]);
        // Level 2 of 5 is the second position.
        assert_eq!(t.difficulty, vec![0.0, 1.0, 0.0, 0.0, 0.0]);

        let one = encode_metadata(&meta(vec![4], 1), &schema()).unwrap();
        assert_eq!(one.concepts.iter().filter(|&&x| x == 1.0).count(), 1);
        assert!(encode_metadata(&meta(vec![10], 1), &schema()).is_err());
        assert!(encode_metadata(&meta(vec![1], 6), &schema()).is_err());
    }

    proptest! {
        #[test]
        fn concept_vector_sums_to_one(concepts in proptest::collection::vec(0u32..10, 1..10)) {
            let t = encode_metadata(&meta(concepts, 3), &schema()).unwrap();
            prop_assert!((t.concepts.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cleaning_never_lengthens(raw in "(<[a-z]{1,3}>|&nbsp;|&amp;|[a-z ]{0,6}|\\$[x+1 ]{0,4}\\$|the ){0,8}") {
            let stops: HashSet<String> = ["the".to_string()].into();
            let cleaned = clean_text(&raw, &stops);
            prop_assert!(cleaned.chars().count() <= raw.chars().count());
        }
    }
}
