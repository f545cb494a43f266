//! Template-based synthetic exercise bank with known similarity groups.
//!
//! Every exercise is slot-filled from a template; exercises sharing a template
//! are the ground-truth similar set. Templates come in families that share
//! part of their wording and their formula skeleton, which makes family-mates
//! the hard negatives. Pairs are drawn within a template (positive) and across
//! templates (negative, half of them from the same family), then a fixed
//! fraction of labels is flipped and the flips are logged.
//!
//! Pair construction only approximates the BM25-match and concept-aware
//! strategies used to build annotated data in production: within/cross
//! template sampling is what the generator does.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Corpus, Exercise, Label, LabeledPair, LearningStage, MetaSchema, Metadata, VariantKind,
    DEFAULT_DIFFICULTY_LEVELS,
};
use crate::error::{Error, Result};

const FILLER_WORDS: usize = 30;
const STEM_SIGNATURE: usize = 8;
const STEM_FAMILY_SHARED: usize = 4;
const ANALYSIS_SIGNATURE: usize = 6;
const ANALYSIS_FAMILY_SHARED: usize = 3;
const ANALYSIS_SAMPLED: usize = 4;
const CONDITION_WORDS: usize = 3;
const EXERCISE_TYPES: [&str; 4] = ["choice", "fill", "calculation", "proof"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_templates: usize,
    pub per_template: usize,
    /// Fraction of pair labels flipped, in `[0, 0.5)`.
    pub noise_rate: f64,
    pub vocab_size: usize,
    pub seed: u64,
    pub n_pairs: usize,
    pub image_dim: usize,
    pub n_concepts: u32,
    /// Fraction of each template's exercises generated with the alternate condition.
    pub variant_rate: f64,
    /// Templates per family sharing wording and formula skeleton.
    pub family_size: usize,
    /// Signature words drawn into each stem.
    pub stem_signal: usize,
    /// Whether templates in a family share their condition wording.
    pub family_conditions: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_templates: 10,
            per_template: 50,
            noise_rate: 0.15,
            vocab_size: 400,
            seed: 7,
            n_pairs: 1000,
            image_dim: super::DEFAULT_IMAGE_DIM,
            n_concepts: 12,
            variant_rate: 0.2,
            family_size: 10,
            stem_signal: 3,
            family_conditions: true,
        }
    }
}

impl SyntheticSpec {
    fn n_families(&self) -> usize {
        self.n_templates.div_ceil(self.family_size)
    }

    fn words_needed(&self) -> usize {
        let per_template = (STEM_SIGNATURE - STEM_FAMILY_SHARED)
            + (ANALYSIS_SIGNATURE - ANALYSIS_FAMILY_SHARED)
            + 2 * CONDITION_WORDS;
        let per_family = STEM_FAMILY_SHARED + ANALYSIS_FAMILY_SHARED + 2 * CONDITION_WORDS;
        FILLER_WORDS + per_template * self.n_templates + per_family * self.n_families()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_templates < 2 {
            return fail(format!("n_templates {} < 2", self.n_templates));
        }
        if self.per_template < 2 {
            return fail(format!("per_template {} < 2", self.per_template));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return fail(format!("noise_rate {} outside [0, 0.5)", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.variant_rate) {
            return fail(format!("variant_rate {} outside [0, 1]", self.variant_rate));
        }
        if self.family_size == 0 {
            return fail("family_size must be at least 1".into());
        }
        if self.stem_signal == 0 || self.stem_signal > STEM_SIGNATURE {
            return fail(format!(
                "stem_signal {} outside [1, {STEM_SIGNATURE}]",
                self.stem_signal
            ));
        }
        if self.image_dim == 0 {
            return fail("image_dim must be positive".into());
        }
        if self.n_concepts < 2 {
            return fail(format!("n_concepts {} < 2", self.n_concepts));
        }
        if self.vocab_size < self.words_needed() {
            return fail(format!(
                "vocab_size {} too small, {} words needed",
                self.vocab_size,
                self.words_needed()
            ));
        }
        let n_pos = self.n_pairs / 2;
        let max_pos = self.n_templates * self.per_template * (self.per_template - 1) / 2;
        if n_pos > max_pos / 2 {
            return fail(format!(
                "n_pairs {} needs {n_pos} positive pairs, at most half of the {max_pos} possible ones may be used",
                self.n_pairs
            ));
        }
        Ok(())
    }
}

/// Generator output: the bank plus everything needed to score against ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    /// Template index of each exercise, by corpus position.
    pub templates: Vec<usize>,
    /// Whether each exercise carries its template's alternate condition.
    pub variants: Vec<bool>,
    /// Pairs with (possibly flipped) labels.
    pub pairs: Vec<LabeledPair>,
    /// Indices into `pairs` whose label was flipped.
    pub flips: Vec<usize>,
    /// Labels before flipping.
    pub true_labels: Vec<Label>,
}

impl SyntheticData {
    /// Corpus positions sharing the template of exercise `i`, excluding `i`.
    pub fn template_mates(&self, i: usize) -> Vec<usize> {
        let t = self.templates[i];
        (0..self.templates.len())
            .filter(|&j| j != i && self.templates[j] == t)
            .collect()
    }

    pub fn same_template(&self, a: &str, b: &str) -> bool {
        match (self.corpus.position(a), self.corpus.position(b)) {
            (Some(i), Some(j)) => self.templates[i] == self.templates[j],
            _ => false,
        }
    }
}

struct Template {
    family: usize,
    stem_signature: Vec<String>,
    analysis_signature: Vec<String>,
    condition: Vec<String>,
    alt_condition: Vec<String>,
    skeleton: usize,
    exercise_type: &'static str,
    base_difficulty: u8,
    grade: u8,
    concepts: Vec<u32>,
    image_centroid: Vec<f64>,
}

/// Deterministic pronounceable pseudo-word for index `i`.
fn pseudo_word(i: usize) -> String {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut n = i;
    let mut w = String::new();
    for _ in 0..3 {
        let syllable = n % 80;
        n /= 80;
        w.push_str(ONSETS[syllable % 16]);
        w.push_str(VOWELS[syllable / 16]);
    }
    w
}

fn formula(skeleton: usize, rng: &mut ChaCha8Rng) -> String {
    let mut c = || rng.random_range(2..10);
    match skeleton % 6 {
        0 => format!("{}x + {} = {}", c(), c(), c()),
        1 => format!("x^2 - {}x = {}", c(), c()),
        2 => format!("\\frac{{x}}{{{}}} + {} = {}", c(), c(), c()),
        3 => format!("{}(x - {}) = {}", c(), c(), c()),
        4 => format!("\\sqrt{{x + {}}} = {}", c(), c()),
        _ => format!("{}x^2 + {}x - {} = 0", c(), c(), c()),
    }
}

fn sample_words(words: &[String], k: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    index::sample(rng, words.len(), k.min(words.len()))
        .into_iter()
        .map(|i| words[i].clone())
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let words: Vec<String> = (0..spec.vocab_size).map(pseudo_word).collect();
    let filler = words[..FILLER_WORDS].to_vec();
    let mut cursor = FILLER_WORDS;
    let mut take = |k: usize| {
        let out = words[cursor..cursor + k].to_vec();
        cursor += k;
        out
    };

    let n_families = spec.n_families();
    let family_words: Vec<(Vec<String>, Vec<String>)> = (0..n_families)
        .map(|_| (take(STEM_FAMILY_SHARED), take(ANALYSIS_FAMILY_SHARED)))
        .collect();
    let family_conditions: Vec<(Vec<String>, Vec<String>)> = (0..n_families)
        .map(|_| (take(CONDITION_WORDS), take(CONDITION_WORDS)))
        .collect();
    let mut templates = Vec::with_capacity(spec.n_templates);
    for t in 0..spec.n_templates {
        let family = t / spec.family_size;
        let mut stem_signature = family_words[family].0.clone();
        stem_signature.extend(take(STEM_SIGNATURE - STEM_FAMILY_SHARED));
        let mut analysis_signature = family_words[family].1.clone();
        analysis_signature.extend(take(ANALYSIS_SIGNATURE - ANALYSIS_FAMILY_SHARED));
        let (condition, alt_condition) = if spec.family_conditions {
            family_conditions[family].clone()
        } else {
            (take(CONDITION_WORDS), take(CONDITION_WORDS))
        };
        let mut concepts = vec![
            family as u32 % spec.n_concepts,
            (n_families + t) as u32 % spec.n_concepts,
        ];
        concepts.sort_unstable();
        concepts.dedup();
        templates.push(Template {
            family,
            stem_signature,
            analysis_signature,
            condition,
            alt_condition,
            skeleton: family,
            exercise_type: EXERCISE_TYPES[t % EXERCISE_TYPES.len()],
            base_difficulty: (t * 7 % DEFAULT_DIFFICULTY_LEVELS as usize) as u8 + 1,
            grade: 7 + (t % 3) as u8,
            concepts,
            image_centroid: (0..spec.image_dim)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect(),
        });
    }
    // Words never assigned to a template act as rare background noise.
    let background = words[cursor..].to_vec();

    // Build exercises template by template, then shuffle bank order so that ids
    // carry no template information.
    let mut raw: Vec<(usize, bool, Exercise)> = Vec::new();
    for (t, tpl) in templates.iter().enumerate() {
        let n_variants = (spec.variant_rate * spec.per_template as f64).round() as usize;
        for k in 0..spec.per_template {
            let variant = k < n_variants;
            let ex = make_exercise(tpl, variant, spec.stem_signal, &filler, &background, &mut rng);
            raw.push((t, variant, ex));
        }
    }
    raw.shuffle(&mut rng);
    let width = (raw.len().max(2) - 1).to_string().len().max(4);
    let mut exercises = Vec::with_capacity(raw.len());
    let mut tpl_of = Vec::with_capacity(raw.len());
    let mut variants = Vec::with_capacity(raw.len());
    for (i, (t, v, mut ex)) in raw.into_iter().enumerate() {
        ex.id = format!("ex{i:0width$}");
        exercises.push(ex);
        tpl_of.push(t);
        variants.push(v);
    }

    let schema = MetaSchema {
        exercise_types: EXERCISE_TYPES.iter().map(|s| s.to_string()).collect(),
        difficulty_levels: DEFAULT_DIFFICULTY_LEVELS,
        concept_count: spec.n_concepts,
        image_dim: spec.image_dim,
    };
    let corpus = Corpus::new(schema, exercises)?;

    let members: Vec<Vec<usize>> = (0..spec.n_templates)
        .map(|t| (0..tpl_of.len()).filter(|&i| tpl_of[i] == t).collect())
        .collect();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    let mut true_labels = Vec::with_capacity(spec.n_pairs);
    let n_pos = spec.n_pairs / 2;
    while pairs.len() < spec.n_pairs {
        let positive = pairs.len() < n_pos;
        let t = rng.random_range(0..spec.n_templates);
        let u = if positive {
            t
        } else {
            let family = templates[t].family;
            let same_family: Vec<usize> = (0..spec.n_templates)
                .filter(|&o| o != t && templates[o].family == family)
                .collect();
            if !same_family.is_empty() && rng.random_bool(0.5) {
                same_family[rng.random_range(0..same_family.len())]
            } else {
                let mut o = rng.random_range(0..spec.n_templates - 1);
                if o >= t {
                    o += 1;
                }
                o
            }
        };
        let a = members[t][rng.random_range(0..members[t].len())];
        let b = members[u][rng.random_range(0..members[u].len())];
        if a == b || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        let label = Label::from_bool(positive);
        let mut pair = LabeledPair::new(corpus[a].id.clone(), corpus[b].id.clone(), label);
        if positive {
            pair.variant = Some(if variants[a] != variants[b] {
                VariantKind::Variant
            } else {
                VariantKind::PlainSimilar
            });
        }
        pairs.push(pair);
        true_labels.push(label);
    }

    let n_flips = (spec.noise_rate * spec.n_pairs as f64).round() as usize;
    let mut flips = index::sample(&mut rng, spec.n_pairs, n_flips).into_vec();
    flips.sort_unstable();
    for &i in &flips {
        pairs[i].label = pairs[i].label.flipped();
    }
    for pair in &mut pairs {
        let mut votes = vec![pair.label; 3];
        if rng.random_bool(1.0 / 3.0) {
            votes[rng.random_range(0..3)] = pair.label.flipped();
        }
        pair.votes = votes;
    }

    Ok(SyntheticData {
        corpus,
        templates: tpl_of,
        variants,
        pairs,
        flips,
        true_labels,
    })
}

fn make_exercise(
    tpl: &Template,
    variant: bool,
    stem_signal: usize,
    filler: &[String],
    background: &[String],
    rng: &mut ChaCha8Rng,
) -> Exercise {
    let mut stem_words = sample_words(&tpl.stem_signature, stem_signal, rng);
    stem_words.extend(if variant {
        tpl.alt_condition.iter().cloned()
    } else {
        tpl.condition.iter().cloned()
    });
    stem_words.extend(sample_words(filler, 3, rng));
    stem_words.extend(sample_words(background, 2, rng));
    stem_words.shuffle(rng);
    let stem = format!("{} ${}$", stem_words.join(" "), formula(tpl.skeleton, rng));

    let answer_value: i32 = rng.random_range(-9..20);
    let options = if tpl.exercise_type == "choice" {
        let mut values = vec![answer_value];
        while values.len() < 4 {
            let v = rng.random_range(-9..20);
            if !values.contains(&v) {
                values.push(v);
            }
        }
        values.shuffle(rng);
        ["A", "B", "C", "D"]
            .iter()
            .zip(values)
            .map(|(l, v)| format!("{l}. {v}"))
            .collect()
    } else {
        Vec::new()
    };

    let mut analysis_words = sample_words(&tpl.analysis_signature, ANALYSIS_SAMPLED, rng);
    analysis_words.extend(sample_words(filler, 3, rng));
    analysis_words.extend(sample_words(background, 1, rng));
    analysis_words.shuffle(rng);
    let analysis = format!(
        "{} ${}$ so $x = {answer_value}$",
        analysis_words.join(" "),
        formula(tpl.skeleton, rng)
    );

    let jitter: i32 = rng.random_range(-1..=1);
    let difficulty =
        (tpl.base_difficulty as i32 + jitter).clamp(1, DEFAULT_DIFFICULTY_LEVELS as i32);
    let image = tpl
        .image_centroid
        .iter()
        .map(|c| c + rng.random_range(-0.3..=0.3))
        .collect();

    Exercise {
        id: String::new(),
        stem,
        options,
        answer: answer_value.to_string(),
        analysis,
        image_features: vec![image],
        metadata: Metadata {
            exercise_type: tpl.exercise_type.to_string(),
            difficulty: difficulty as u8,
            knowledge_concepts: tpl.concepts.clone(),
        },
        learning_stage: LearningStage::new(tpl.grade, rng.random_range(1..=2)),
    }
}
