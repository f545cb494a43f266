//! Pairwise multi-task ranker: stem/stem, analysis/analysis and stem/analysis
//! tasks over a shared encoder, combined by a gated weighted loss.

mod model;
mod tasks;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledPair;
use crate::error::{Error, Result};
use crate::esrm::EncodedExercise;
use crate::exec;
use crate::params::Parameters;
use crate::recall::{candidate_order, Candidate};

pub use model::{interaction, MultitaskOutput, PairCache, RankerParams, TaskParams, Weighting};
pub use tasks::{build_task_instances, Task, TaskBuilder, TaskInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Labeled pairs per optimization step; each contributes all its task
    /// instances.
    pub batch_size: usize,
    pub seed: u64,
    /// Tasks trained on; the rest are dropped from every batch.
    pub tasks: Vec<Task>,
    /// Gate-produced coefficients when true, `alpha` otherwise.
    pub moe: bool,
    pub alpha: [f64; 3],
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 3,
            batch_size: 8,
            seed: 7,
            tasks: Task::ALL.to_vec(),
            moe: true,
            alpha: [1.0 / 3.0; 3],
        }
    }
}

impl RankConfig {
    /// Primary task only.
    pub fn single_task() -> Self {
        Self {
            tasks: vec![Task::T1],
            moe: false,
            alpha: [1.0, 0.0, 0.0],
            ..Self::default()
        }
    }

    /// All tasks, equal fixed weights.
    pub fn fixed_weights() -> Self {
        Self {
            moe: false,
            ..Self::default()
        }
    }

    pub fn weighting(&self) -> Weighting {
        if self.moe {
            Weighting::Moe
        } else {
            Weighting::Fixed(self.alpha)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("rank.tasks is empty".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("rank.lr and rank.batch_size must be positive".into()));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("rank.alpha must be non-negative".into()));
        }
        if !self.moe && self.tasks.iter().all(|t| self.alpha[t.index()] == 0.0) {
            return Err(Error::Config("rank.alpha is zero on every selected task".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RankEpoch {
    /// Mean weighted loss over the epoch's batches.
    pub loss: f64,
    /// Mean per-task loss over the batches where the task was present.
    pub task_losses: [Option<f64>; 3],
    /// Mean coefficients over the epoch's batches.
    pub alpha: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub params: RankerParams,
    pub history: Vec<RankEpoch>,
}

/// Task instances for every pair, in pair order. Each pair draws from its own
/// stream so the result does not depend on which other pairs are present.
pub fn pair_instances(
    pairs: &[LabeledPair],
    bank: &[EncodedExercise],
    seed: u64,
) -> Result<Vec<Vec<TaskInstance>>> {
    let builder = TaskBuilder::new(bank);
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            builder.instances(p, &mut rng)
        })
        .collect()
}

/// Plain SGD over shuffled pair batches.
pub fn train_ranker(
    init: RankerParams,
    pairs: &[LabeledPair],
    bank: &[EncodedExercise],
    cfg: &RankConfig,
) -> Result<RankOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no labeled pairs to rank on".into()));
    }
    let mut instances = pair_instances(pairs, bank, cfg.seed)?;
    for set in &mut instances {
        set.retain(|inst| cfg.tasks.contains(&inst.task));
    }
    let weighting = cfg.weighting();
    let mut params = init;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0a4c);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut stats = RankEpoch::default();
        let mut task_sums = [0.0; 3];
        let mut task_counts = [0usize; 3];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TaskInstance> =
                chunk.iter().flat_map(|&i| instances[i].iter().cloned()).collect();
            let out = params.multitask_loss(&batch, weighting)?;
            if !out.loss.is_finite() || !out.grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite ranking loss in epoch {epoch}"
                )));
            }
            params.sgd_step(&out.grads, cfg.lr);
            stats.loss += out.loss;
            for t in 0..3 {
                stats.alpha[t] += out.alpha[t];
                if let Some(l) = out.task_losses[t] {
                    task_sums[t] += l;
                    task_counts[t] += 1;
                }
            }
            steps += 1;
        }
        let inv = 1.0 / steps as f64;
        stats.loss *= inv;
        stats.alpha.iter_mut().for_each(|a| *a *= inv);
        stats.task_losses =
            std::array::from_fn(|t| (task_counts[t] > 0).then(|| task_sums[t] / task_counts[t] as f64));
        log::debug!("rank epoch {epoch}: loss {:.5} alpha {:?}", stats.loss, stats.alpha);
        history.push(stats);
    }
    if !params.all_finite() {
        return Err(Error::Divergence("non-finite ranker weights".into()));
    }
    Ok(RankOutcome { params, history })
}

/// Re-scores candidates against the query with the primary task head and sorts
/// them by score descending, ties by id.
pub fn rank(
    query: &EncodedExercise,
    candidates: &[Candidate],
    bank: &[EncodedExercise],
    params: &RankerParams,
) -> Result<Vec<Candidate>> {
    if let Some(c) = candidates.iter().find(|c| c.index >= bank.len()) {
        return Err(Error::InvalidArgument(format!(
            "candidate {:?} is outside the bank",
            c.id
        )));
    }
    let scores = exec::map_collect(candidates, |c| params.score_pair(&query.stem, &bank[c.index].stem));
    let mut out = candidates
        .iter()
        .zip(scores)
        .map(|(c, s)| {
            Ok(Candidate {
                score: s?,
                ..c.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(candidate_order);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::esrm::{corpus_vocab, encode_corpus, EncoderParams, ModelShape};
    use crate::recall::Source;
    use crate::textnorm::TextNormalizer;

    struct Fixture {
        bank: Vec<EncodedExercise>,
        pairs: Vec<LabeledPair>,
        init: RankerParams,
    }

    fn fixture() -> Fixture {
        let spec = SyntheticSpec {
            n_templates: 6,
            per_template: 4,
            n_pairs: 24,
            noise_rate: 0.0,
            ..SyntheticSpec::default()
        };
        let synth = generate_synthetic(&spec).unwrap();
        let normalizer = TextNormalizer::default();
        let vocab = corpus_vocab(&synth.corpus, &normalizer, 1);
        let bank = encode_corpus(&synth.corpus, &normalizer, &vocab).unwrap();
        let shape = ModelShape::for_schema(synth.corpus.schema(), vocab.len(), 8);
        let init = RankerParams::init(EncoderParams::init(shape, 3).unwrap(), 3);
        Fixture {
            bank,
            pairs: synth.pairs,
            init,
        }
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let f = fixture();
        let cfg = RankConfig {
            epochs: 0,
            ..RankConfig::default()
        };
        let out = train_ranker(f.init.clone(), &f.pairs, &f.bank, &cfg).unwrap();
        assert_eq!(out.params.flat(), f.init.flat());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let f = fixture();
        let cfg = RankConfig {
            epochs: 6,
            lr: 0.1,
            batch_size: 8,
            ..RankConfig::default()
        };
        let a = train_ranker(f.init.clone(), &f.pairs, &f.bank, &cfg).unwrap();
        let b = train_ranker(f.init.clone(), &f.pairs, &f.bank, &cfg).unwrap();
        assert_eq!(a.params.flat(), b.params.flat());
        let first = a.history.first().unwrap().loss;
        let last = a.history.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
        for e in &a.history {
            assert!((e.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_task_ignores_auxiliary_tasks() {
        let f = fixture();
        let cfg = RankConfig {
            epochs: 1,
            ..RankConfig::single_task()
        };
        let out = train_ranker(f.init.clone(), &f.pairs, &f.bank, &cfg).unwrap();
        let e = out.history[0];
        assert_eq!(e.alpha, [1.0, 0.0, 0.0]);
        assert!(e.task_losses[1].is_none() && e.task_losses[2].is_none());
        // Untouched task heads stay at initialization.
        assert_eq!(out.params.tasks[1], f.init.tasks[1]);
    }

    #[test]
    fn rejects_bad_configs() {
        let f = fixture();
        let bad = [
            RankConfig {
                tasks: vec![],
                ..RankConfig::default()
            },
            RankConfig {
                moe: false,
                tasks: vec![Task::T2],
                alpha: [1.0, 0.0, 0.0],
                ..RankConfig::default()
            },
            RankConfig {
                lr: 0.0,
                ..RankConfig::default()
            },
        ];
        for cfg in &bad {
            assert!(train_ranker(f.init.clone(), &f.pairs, &f.bank, cfg).is_err());
        }
        let cfg: RankConfig = crate::config::from_str("epochs = 1\ntasks = [\"t1\", \"t3\"]\nmoe = false").unwrap();
        assert_eq!(cfg.tasks, vec![Task::T1, Task::T3]);
        assert!(crate::config::from_str::<RankConfig>("learning_rate = 1").is_err());
    }

    #[test]
    fn rank_sorts_a_permutation() {
        let f = fixture();
        let query = &f.bank[0];
        let candidates: Vec<Candidate> = f.bank[1..]
            .iter()
            .enumerate()
            .map(|(i, e)| Candidate {
                id: e.id.clone(),
                index: i + 1,
                score: 0.0,
                source: Source::Exact,
            })
            .collect();
        let ranked = rank(query, &candidates, &f.bank, &f.init).unwrap();
        let mut a: Vec<_> = ranked.iter().map(|c| c.id.clone()).collect();
        let mut b: Vec<_> = candidates.iter().map(|c| c.id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(ranked.iter().all(|c| (0.0..=1.0).contains(&c.score)));
        assert_eq!(ranked, rank(query, &candidates, &f.bank, &f.init).unwrap());
    }
}
