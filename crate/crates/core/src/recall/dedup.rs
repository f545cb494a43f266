//! Training data for the duplicate detector, built by perturbing bank exercises.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Exercise, LabeledPair};
use crate::error::Result;

use super::pairclf::{pair_features, PairMode, PairSide};

/// Embedding plus token views of one exercise, owned.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub embedding: Vec<f64>,
    pub tokens: Vec<u32>,
    pub formula: Vec<u32>,
}

impl Featurized {
    pub fn side(&self) -> PairSide<'_> {
        PairSide {
            embedding: &self.embedding,
            tokens: &self.tokens,
            formula: &self.formula,
        }
    }
}

/// Non-substantive edit: a year mentioned in passing before the stem.
pub fn add_year_distractor(ex: &Exercise, year: u32) -> Exercise {
    let mut out = ex.clone();
    out.stem = format!("In {year}, {}", ex.stem);
    out
}

/// Substantive edit: raise the degree of the first formula in the stem. An
/// existing single-digit exponent is incremented; otherwise the first `x`
/// becomes `x^2`. Returns `None` when the stem has no formula to change.
pub fn raise_degree(ex: &Exercise) -> Option<Exercise> {
    let parts: Vec<&str> = ex.stem.split('$').collect();
    let mut rebuilt = Vec::with_capacity(parts.len());
    let mut changed = false;
    for (i, part) in parts.iter().enumerate() {
        let formula = i % 2 == 1 && i + 1 < parts.len();
        if formula && !changed {
            if let Some(new) = bump_exponent(part).or_else(|| square_first_x(part)) {
                rebuilt.push(new);
                changed = true;
                continue;
            }
        }
        rebuilt.push((*part).to_string());
    }
    changed.then(|| {
        let mut out = ex.clone();
        out.stem = rebuilt.join("$");
        out
    })
}

fn bump_exponent(f: &str) -> Option<String> {
    let pos = f.find('^')?;
    let digit = f[pos + 1..].chars().next()?.to_digit(10)?;
    let next = (digit + 1) % 10;
    Some(format!("{}^{}{}", &f[..pos], next.max(2), &f[pos + 2..]))
}

fn square_first_x(f: &str) -> Option<String> {
    let pos = f.find('x')?;
    Some(format!("{}x^2{}", &f[..pos], &f[pos + 1..]))
}

/// Labeled feature vectors for the duplicate detector.
///
/// For each sampled anchor: duplicates are the exercise itself and year
/// distractor copies (both orders); non-duplicates are a degree-raised copy,
/// its annotated similar partners and a random other exercise.
pub fn dedup_training_set<F>(
    corpus: &Corpus,
    labeled: &[LabeledPair],
    featurize: F,
    anchors: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, bool)>>
where
    F: Fn(&Exercise) -> Result<Featurized>,
{
    let mode = PairMode::Symmetric;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = corpus.len();
    let picked = index::sample(&mut rng, n, anchors.min(n)).into_vec();
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); n];
    for p in labeled.iter().filter(|p| p.label.is_similar()) {
        if let (Some(a), Some(b)) = (corpus.position(&p.a_id), corpus.position(&p.b_id)) {
            partners[a].push(b);
            partners[b].push(a);
        }
    }
    let mut out = Vec::new();
    let mut push = |a: &Featurized, b: &Featurized, dup: bool| {
        out.push((pair_features(mode, a.side(), b.side()), dup));
    };
    for &i in &picked {
        let ex = &corpus[i];
        let base = featurize(ex)?;
        push(&base, &base, true);
        let year = rng.random_range(1990..2030);
        let noisy = featurize(&add_year_distractor(ex, year))?;
        push(&base, &noisy, true);
        push(&noisy, &base, true);
        if let Some(raised) = raise_degree(ex) {
            let raised = featurize(&raised)?;
            push(&base, &raised, false);
            push(&noisy, &raised, false);
        }
        if let Some(&j) = partners[i].first() {
            push(&base, &featurize(&corpus[j])?, false);
        }
        let mut j = rng.random_range(0..n);
        if j == i {
            j = (j + 1) % n;
        }
        if j != i {
            push(&base, &featurize(&corpus[j])?, false);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LearningStage, Metadata};

    fn ex(stem: &str) -> Exercise {
        Exercise {
            id: "e".into(),
            stem: stem.into(),
            options: Vec::new(),
            answer: String::new(),
            analysis: String::new(),
            image_features: Vec::new(),
            metadata: Metadata {
                exercise_type: "t".into(),
                difficulty: 1,
                knowledge_concepts: vec![0],
            },
            learning_stage: LearningStage::new(7, 1),
        }
    }

    #[test]
    fn degree_raising() {
        assert_eq!(
            raise_degree(&ex("solve $x^2 - 3x = 4$")).unwrap().stem,
            "solve $x^3 - 3x = 4$"
        );
        assert_eq!(
            raise_degree(&ex("solve $2x + 1 = 5$ now")).unwrap().stem,
            "solve $2x^2 + 1 = 5$ now"
        );
        assert_eq!(raise_degree(&ex("no formula here")), None);
        assert_eq!(raise_degree(&ex("solve $y = 3$")), None);
    }

    #[test]
    fn year_distractor_keeps_formula() {
        let e = add_year_distractor(&ex("solve $x = 1$"), 2019);
        assert_eq!(e.stem, "In 2019, solve $x = 1$");
    }
}
