//! Label-noise cleaning by confident learning: out-of-fold probabilities, a
//! confident joint of noisy vs. inferred labels, pruning, and retraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledPair};
use crate::error::{Error, Result};
use crate::esrm::EncodedExercise;
use crate::exec;
use crate::ranking::{train_ranker, RankConfig, RankerParams, Task, TaskBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    /// For each off-diagonal cell `C[i][j]`, drop that many class-`i`
    /// examples with the lowest class-`i` probability.
    NoiseRate,
    /// Per class, drop the off-diagonal row mass after rescaling each row of
    /// the joint to the observed class count, lowest class probability first.
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClConfig {
    pub folds: usize,
    pub strategy: PruneStrategy,
    pub seed: u64,
    /// Training epochs of each out-of-fold model.
    pub epochs: usize,
}

impl Default for ClConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            strategy: PruneStrategy::NoiseRate,
            seed: 7,
            epochs: 1,
        }
    }
}

/// Stratified fold of every pair: each class is shuffled and dealt round-robin.
pub fn assign_folds(labels: &[Label], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("{folds} folds; need at least 2")));
    }
    if labels.len() < 2 * folds {
        return Err(Error::InvalidArgument(format!(
            "{} pairs cannot fill {folds} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for class in [Label::Similar, Label::Dissimilar] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = next % folds;
            next += 1;
        }
    }
    for f in 0..folds {
        let held: Vec<Label> = (0..labels.len()).filter(|&i| fold[i] == f).map(|i| labels[i]).collect();
        let train_has = |c| (0..labels.len()).any(|i| fold[i] != f && labels[i] == c);
        if !train_has(Label::Similar) || !train_has(Label::Dissimilar) {
            return Err(Error::InvalidArgument(format!(
                "fold {f} leaves a single class for training; re-stratify with fewer folds"
            )));
        }
        if held.is_empty() {
            return Err(Error::InvalidArgument(format!("fold {f} is empty")));
        }
    }
    Ok(fold)
}

/// Probability of label 1 for every pair from a primary-task model trained
/// without the pair's fold. Folds run concurrently with per-fold seeds.
pub fn out_of_fold_probs(
    pairs: &[LabeledPair],
    bank: &[EncodedExercise],
    init: &RankerParams,
    rank: &RankConfig,
    cfg: &ClConfig,
) -> Result<Vec<f64>> {
    let labels: Vec<Label> = pairs.iter().map(|p| p.label).collect();
    let fold = assign_folds(&labels, cfg.folds, cfg.seed)?;
    let builder = TaskBuilder::new(bank);
    let positions = pairs
        .iter()
        .map(|p| Ok((builder.position(&p.a_id)?, builder.position(&p.b_id)?)))
        .collect::<Result<Vec<_>>>()?;
    let per_fold = exec::map_range(cfg.folds, |f| -> Result<Vec<(usize, f64)>> {
        let train: Vec<LabeledPair> = (0..pairs.len())
            .filter(|&i| fold[i] != f)
            .map(|i| pairs[i].clone())
            .collect();
        let fold_cfg = RankConfig {
            epochs: cfg.epochs,
            seed: cfg.seed.wrapping_add(1 + f as u64),
            tasks: vec![Task::T1],
            moe: false,
            alpha: [1.0, 0.0, 0.0],
            ..rank.clone()
        };
        let model = train_ranker(init.clone(), &train, bank, &fold_cfg)?.params;
        (0..pairs.len())
            .filter(|&i| fold[i] == f)
            .map(|i| {
                let (a, b) = positions[i];
                Ok((i, model.score_pair(&bank[a].stem, &bank[b].stem)?))
            })
            .collect()
    });
    let mut probs = vec![f64::NAN; pairs.len()];
    for scored in per_fold {
        for (i, p) in scored? {
            probs[i] = p;
        }
    }
    Ok(probs)
}

/// Counts `C[noisy][inferred]` and per-class thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidentJoint {
    pub counts: [[usize; 2]; 2],
    pub thresholds: [f64; 2],
}

impl ConfidentJoint {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts[0][1] == 0 && self.counts[1][0] == 0
    }
}

/// Absorbs rounding in the threshold means so a probability equal to a
/// threshold in exact arithmetic still reaches it.
const THRESHOLD_SLACK: f64 = 1e-12;

fn class_probs(p1: f64) -> [f64; 2] {
    [1.0 - p1, p1]
}

/// `t_c` is the mean probability of class `c` over pairs noisily labeled `c`;
/// a pair is counted under the most probable class whose probability reaches
/// that class's threshold, or skipped when none does.
pub fn build_confident_joint(probs: &[f64], labels: &[Label]) -> Result<ConfidentJoint> {
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    let mut thresholds = [0.0; 2];
    for (c, t) in thresholds.iter_mut().enumerate() {
        let members: Vec<f64> = probs
            .iter()
            .zip(labels)
            .filter(|(_, l)| l.as_class() == c)
            .map(|(p, _)| class_probs(*p)[c])
            .collect();
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("no pairs labeled class {c}")));
        }
        *t = members.iter().sum::<f64>() / members.len() as f64;
    }
    let mut counts = [[0; 2]; 2];
    for (p, l) in probs.iter().zip(labels) {
        let cp = class_probs(*p);
        let inferred = (0..2)
            .filter(|&c| cp[c] >= thresholds[c] - THRESHOLD_SLACK)
            .max_by(|&a, &b| cp[a].total_cmp(&cp[b]).then(b.cmp(&a)));
        if let Some(j) = inferred {
            counts[l.as_class()][j] += 1;
        }
    }
    Ok(ConfidentJoint { counts, thresholds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub cleaned: Vec<LabeledPair>,
    /// Indices of removed pairs, ascending.
    pub removed: Vec<usize>,
}

/// How many class-`c` pairs each strategy removes.
fn prune_counts(joint: &ConfidentJoint, labels: &[Label], strategy: PruneStrategy) -> [usize; 2] {
    std::array::from_fn(|c| {
        let off = joint.counts[c][1 - c];
        match strategy {
            PruneStrategy::NoiseRate => off,
            PruneStrategy::Class => {
                let row: usize = joint.counts[c].iter().sum();
                if row == 0 {
                    return 0;
                }
                let observed = labels.iter().filter(|l| l.as_class() == c).count();
                (off as f64 * observed as f64 / row as f64).round() as usize
            }
        }
    })
}

pub fn prune(
    pairs: &[LabeledPair],
    joint: &ConfidentJoint,
    probs: &[f64],
    strategy: PruneStrategy,
) -> Result<Pruned> {
    if probs.len() != pairs.len() {
        return Err(Error::InvalidArgument("probabilities and pairs differ in length".into()));
    }
    let labels: Vec<Label> = pairs.iter().map(|p| p.label).collect();
    let counts = prune_counts(joint, &labels, strategy);
    let mut drop = vec![false; pairs.len()];
    for (c, &n) in counts.iter().enumerate() {
        let mut members: Vec<usize> = (0..pairs.len()).filter(|&i| labels[i].as_class() == c).collect();
        members.sort_by(|&a, &b| {
            class_probs(probs[a])[c]
                .total_cmp(&class_probs(probs[b])[c])
                .then(a.cmp(&b))
        });
        for &i in members.iter().take(n) {
            drop[i] = true;
        }
    }
    let removed: Vec<usize> = (0..pairs.len()).filter(|&i| drop[i]).collect();
    let cleaned = (0..pairs.len()).filter(|&i| !drop[i]).map(|i| pairs[i].clone()).collect();
    Ok(Pruned { cleaned, removed })
}

/// Audit trail of one cleaning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub joint: ConfidentJoint,
    pub strategy: PruneStrategy,
    pub pairs: usize,
    pub prune_count: usize,
    /// `(a_id, b_id)` of every pruned pair.
    pub pruned: Vec<(String, String)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric_after: Option<f64>,
}

impl CleaningReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct CleanOutcome {
    pub params: RankerParams,
    pub cleaned: Vec<LabeledPair>,
    pub report: CleaningReport,
}

/// Estimation, pruning, and retraining on the cleaned pairs. When `evaluate`
/// is given, a ranker trained on the uncleaned pairs is scored too so the
/// report carries a before/after comparison.
pub fn clean_and_retrain(
    pairs: &[LabeledPair],
    bank: &[EncodedExercise],
    init: &RankerParams,
    rank: &RankConfig,
    cfg: &ClConfig,
    evaluate: Option<&dyn Fn(&RankerParams) -> Result<f64>>,
) -> Result<CleanOutcome> {
    let probs = out_of_fold_probs(pairs, bank, init, rank, cfg)?;
    let labels: Vec<Label> = pairs.iter().map(|p| p.label).collect();
    let joint = build_confident_joint(&probs, &labels)?;
    let pruned = prune(pairs, &joint, &probs, cfg.strategy)?;
    log::info!(
        "confident joint {:?}, pruned {} of {} pairs",
        joint.counts,
        pruned.removed.len(),
        pairs.len()
    );
    let params = train_ranker(init.clone(), &pruned.cleaned, bank, rank)?.params;
    let (metric_before, metric_after) = match evaluate {
        Some(eval) => {
            let before = train_ranker(init.clone(), pairs, bank, rank)?.params;
            (Some(eval(&before)?), Some(eval(&params)?))
        }
        None => (None, None),
    };
    let report = CleaningReport {
        joint,
        strategy: cfg.strategy,
        pairs: pairs.len(),
        prune_count: pruned.removed.len(),
        pruned: pruned
            .removed
            .iter()
            .map(|&i| (pairs[i].a_id.clone(), pairs[i].b_id.clone()))
            .collect(),
        metric_before,
        metric_after,
    };
    Ok(CleanOutcome {
        params,
        cleaned: pruned.cleaned,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_bool(b == 1)).collect()
    }

    fn pairs_for(labels: &[Label]) -> Vec<LabeledPair> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| LabeledPair::new(format!("a{i}"), format!("b{i}"), l))
            .collect()
    }

    #[test]
    fn hand_built_thresholds_and_counts() {
        let probs = [0.9, 0.8, 0.7, 0.2, 0.1, 0.6];
        let l = labels(&[1, 1, 1, 0, 0, 0]);
        let j = build_confident_joint(&probs, &l).unwrap();
        assert!((j.thresholds[1] - 0.8).abs() < 1e-12);
        assert!((j.thresholds[0] - 0.7).abs() < 1e-12);
        // 0.7 labeled 1 falls short of t_1 = 0.8 and its class-0 probability 0.3
        // of t_0; the 0.6 pair labeled 0 misses both thresholds as well.
        assert_eq!(j.counts, [[2, 0], [0, 2]]);
        assert!(j.total() <= 6);
    }

    #[test]
    fn indicator_probabilities_give_diagonal_joint_and_no_pruning() {
        let l = labels(&[1, 0, 1, 1, 0, 0, 1, 0]);
        let probs: Vec<f64> = l.iter().map(|l| l.as_class() as f64).collect();
        let j = build_confident_joint(&probs, &l).unwrap();
        assert!(j.is_diagonal());
        assert_eq!(j.total(), l.len());
        let pairs = pairs_for(&l);
        for s in [PruneStrategy::NoiseRate, PruneStrategy::Class] {
            let p = prune(&pairs, &j, &probs, s).unwrap();
            assert!(p.removed.is_empty());
            assert_eq!(p.cleaned, pairs);
        }
    }

    #[test]
    fn prunes_lowest_self_probability_first() {
        let l = labels(&[1, 1, 1, 1, 0, 0, 0, 0]);
        // Pair 3 (labeled 1, p = 0.05) and pair 7 (labeled 0, p = 0.95) look flipped.
        let probs = [0.9, 0.85, 0.8, 0.05, 0.1, 0.15, 0.2, 0.95];
        let j = build_confident_joint(&probs, &l).unwrap();
        assert_eq!(j.counts[1][0], 1);
        assert_eq!(j.counts[0][1], 1);
        let p = prune(&pairs_for(&l), &j, &probs, PruneStrategy::NoiseRate).unwrap();
        assert_eq!(p.removed, vec![3, 7]);
        assert_eq!(p.cleaned.len(), 6);
    }

    #[test]
    fn class_strategy_rescales_rows() {
        let joint = ConfidentJoint {
            counts: [[2, 1], [0, 3]],
            thresholds: [0.5, 0.5],
        };
        // Six pairs labeled 0 but only three counted: one off-diagonal scales to two.
        let l = labels(&[0, 0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(prune_counts(&joint, &l, PruneStrategy::Class), [2, 0]);
        assert_eq!(prune_counts(&joint, &l, PruneStrategy::NoiseRate), [1, 0]);
    }

    #[test]
    fn rejects_empty_class_and_bad_input() {
        assert!(build_confident_joint(&[0.5, 0.6], &labels(&[1, 1])).is_err());
        assert!(build_confident_joint(&[0.5], &labels(&[1, 0])).is_err());
        assert!(build_confident_joint(&[1.5, 0.2], &labels(&[1, 0])).is_err());
    }

    #[test]
    fn folds_are_stratified() {
        let l = labels(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1, 0]);
        let f = assign_folds(&l, 3, 9).unwrap();
        for k in 0..3 {
            let members: Vec<usize> = (0..l.len()).filter(|&i| f[i] == k).collect();
            assert_eq!(members.len(), 4);
            assert_eq!(members.iter().filter(|&&i| l[i].is_similar()).count(), 2);
        }
        assert_eq!(f, assign_folds(&l, 3, 9).unwrap());
        assert!(assign_folds(&l, 7, 9).is_err());
        assert!(assign_folds(&labels(&[1, 1, 1, 1, 0]), 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn pruning_partitions_the_pairs(
            raw in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 4..40),
            by_class in any::<bool>(),
        ) {
            let l: Vec<Label> = raw.iter().map(|r| Label::from_bool(r.1)).collect();
            prop_assume!(l.iter().any(|x| x.is_similar()) && l.iter().any(|x| !x.is_similar()));
            let probs: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let j = build_confident_joint(&probs, &l).unwrap();
            prop_assert!(j.total() <= l.len());
            prop_assert!(j.thresholds.iter().all(|t| (0.0..=1.0).contains(t)));
            let pairs = pairs_for(&l);
            let s = if by_class { PruneStrategy::Class } else { PruneStrategy::NoiseRate };
            let p = prune(&pairs, &j, &probs, s).unwrap();
            prop_assert_eq!(p.cleaned.len() + p.removed.len(), pairs.len());
            let mut kept = p.cleaned.iter();
            for (i, pair) in pairs.iter().enumerate() {
                if !p.removed.contains(&i) {
                    prop_assert_eq!(Some(pair), kept.next());
                }
            }
        }
    }
}
