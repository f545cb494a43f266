//! In-memory experiments on generated corpora with known ground truth: the
//! ranking ablation, recall channel complementarity and label cleaning.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::conflearn::{clean_and_retrain, ClConfig};
use crate::corpus::{generate_synthetic, SyntheticData, SyntheticSpec};
use crate::error::Result;
use crate::esrm::{
    corpus_vocab, embed_all, encode_corpus, fine_tune, pretrain, Embedding, EncodedExercise,
    EncoderParams, FineTuneConfig, ModelShape, PretrainConfig,
};
use crate::exec;
use crate::ranking::{rank, train_ranker, RankConfig, RankerParams};
use crate::recall::{recall, Candidate, RecallConfig, RecallIndexes, RecallQuery};
use crate::textnorm::TextNormalizer;

use super::eval::{eval_precision_at_k, eval_recall_at_k, Judged};

/// Everything up to and including recall, built once per corpus.
pub struct Bench {
    pub data: SyntheticData,
    pub encoded: Vec<EncodedExercise>,
    pub embeddings: Vec<Embedding>,
    pub indexes: RecallIndexes,
    /// Fine-tuned encoder; every ranker starts from it.
    pub encoder: EncoderParams,
    /// Template-mate ids per exercise.
    pub relevant: Vec<HashSet<String>>,
    /// Recall-stage candidates per exercise.
    pub candidates: Vec<Vec<Candidate>>,
}

impl Bench {
    /// Generates `spec`, trains the encoder and recalls candidates for every
    /// exercise. All stage seeds are set to `spec.seed`.
    pub fn build(spec: &SyntheticSpec, recall_cfg: &RecallConfig) -> Result<Self> {
        let seed = spec.seed;
        let data = generate_synthetic(spec)?;
        let norm = TextNormalizer::default();
        let vocab = corpus_vocab(&data.corpus, &norm, 1);
        let encoded = encode_corpus(&data.corpus, &norm, &vocab)?;
        let pcfg = PretrainConfig {
            seed,
            ..PretrainConfig::default()
        };
        let shape = ModelShape::for_schema(data.corpus.schema(), vocab.len(), pcfg.dim);
        let pre = pretrain(EncoderParams::init(shape, seed)?, &encoded, &pcfg)?;
        let fcfg = FineTuneConfig {
            seed,
            ..FineTuneConfig::default()
        };
        let encoder = fine_tune(pre.params, &encoded, &data.pairs, &fcfg)?.params;
        let embeddings = embed_all(&encoded, &encoder)?;
        let indexes = RecallIndexes::build(&encoded, &embeddings, recall_cfg.bm25())?;
        let relevant = (0..encoded.len())
            .map(|i| data.template_mates(i).into_iter().map(|j| encoded[j].id.clone()).collect())
            .collect();
        let candidates = exec::map_range(encoded.len(), |q| {
            recall(
                &RecallQuery {
                    exercise: &encoded[q],
                    embedding: embeddings[q].as_slice(),
                    position: Some(q),
                },
                &indexes,
                &encoded,
                None,
                recall_cfg,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            data,
            encoded,
            embeddings,
            indexes,
            encoder,
            relevant,
            candidates,
        })
    }

    fn judged(&self, lists: &[Vec<Candidate>]) -> Vec<Judged> {
        lists
            .iter()
            .enumerate()
            .map(|(q, l)| Judged {
                id: self.encoded[q].id.clone(),
                relevant: self.relevant[q].clone(),
                retrieved: l.iter().map(|c| c.id.clone()).collect(),
            })
            .collect()
    }

    /// Mean P@k of per-query candidate lists.
    pub fn precision(&self, lists: &[Vec<Candidate>], k: usize) -> Result<f64> {
        Ok(eval_precision_at_k(&self.judged(lists), &[k])?.precision_at_k[0])
    }

    /// Mean R@k of per-query candidate lists.
    pub fn recall_at(&self, lists: &[Vec<Candidate>], k: usize) -> Result<f64> {
        Ok(eval_recall_at_k(&self.judged(lists), k)?.recall_at_k)
    }

    /// Candidates re-ordered by `params`.
    pub fn ranked(&self, params: &RankerParams) -> Result<Vec<Vec<Candidate>>> {
        exec::map_range(self.encoded.len(), |q| rank(&self.encoded[q], &self.candidates[q], &self.encoded, params))
            .into_iter()
            .collect()
    }

    pub fn ranker_init(&self, seed: u64) -> RankerParams {
        RankerParams::init(self.encoder.clone(), seed)
    }

    /// Share of pruned pairs that the generator actually flipped.
    pub fn prune_precision(&self, pruned: &[(String, String)]) -> f64 {
        let flips: HashSet<(&str, &str)> = self
            .data
            .flips
            .iter()
            .map(|&i| (self.data.pairs[i].a_id.as_str(), self.data.pairs[i].b_id.as_str()))
            .collect();
        if pruned.is_empty() {
            return 0.0;
        }
        let hits = pruned.iter().filter(|(a, b)| flips.contains(&(a.as_str(), b.as_str()))).count();
        hits as f64 / pruned.len() as f64
    }
}

/// P@5 of each ablation arm for one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    /// Recall-stage order, no ranker.
    pub recall_order: f64,
    pub t1_only: f64,
    pub mtl: f64,
    pub mtl_moe: f64,
    pub mtl_moe_cl: f64,
    /// Share of pruned pairs that were flipped by the generator.
    pub prune_precision: f64,
    pub pruned: usize,
}

impl AblationRow {
    pub fn arms(&self) -> [f64; 4] {
        [self.t1_only, self.mtl, self.mtl_moe, self.mtl_moe_cl]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    /// Per-arm means: T1-only, +MTL, +MoE, +ConL.
    pub fn mean_arms(&self) -> [f64; 4] {
        let n = self.rows.len().max(1) as f64;
        std::array::from_fn(|i| self.rows.iter().map(|r| r.arms()[i]).sum::<f64>() / n)
    }

    pub fn mean_recall_order(&self) -> f64 {
        self.rows.iter().map(|r| r.recall_order).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_prune_precision(&self) -> f64 {
        self.rows.iter().map(|r| r.prune_precision).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Settings shared by every arm; `rank.tasks`, `rank.moe` and `rank.seed` are
/// overridden per arm and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub rank: RankConfig,
    pub cl: ClConfig,
    pub recall: RecallConfig,
    pub k: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            rank: RankConfig::default(),
            cl: ClConfig::default(),
            recall: RecallConfig::default(),
            k: 5,
        }
    }
}

/// Trains T1-only, fixed-weight multi-task, gated multi-task and gated
/// multi-task after label cleaning on one corpus and scores each by P@k.
pub fn ablation_row(spec: &SyntheticSpec, cfg: &AblationConfig) -> Result<AblationRow> {
    let seed = spec.seed;
    let bench = Bench::build(spec, &cfg.recall)?;
    let pairs = &bench.data.pairs;
    let init = bench.ranker_init(seed);
    let arm = |base: RankConfig| RankConfig {
        seed,
        lr: cfg.rank.lr,
        epochs: cfg.rank.epochs,
        batch_size: cfg.rank.batch_size,
        ..base
    };
    let score = |p: &RankerParams| bench.precision(&bench.ranked(p)?, cfg.k);
    let mut arms = Vec::with_capacity(3);
    for base in [RankConfig::single_task(), RankConfig::fixed_weights(), RankConfig::default()] {
        let out = train_ranker(init.clone(), pairs, &bench.encoded, &arm(base))?;
        arms.push(score(&out.params)?);
    }
    let cl_cfg = ClConfig {
        seed,
        ..cfg.cl.clone()
    };
    let cleaned = clean_and_retrain(pairs, &bench.encoded, &init, &arm(RankConfig::default()), &cl_cfg, None)?;
    Ok(AblationRow {
        seed,
        recall_order: bench.precision(&bench.candidates, cfg.k)?,
        t1_only: arms[0],
        mtl: arms[1],
        mtl_moe: arms[2],
        mtl_moe_cl: score(&cleaned.params)?,
        prune_precision: bench.prune_precision(&cleaned.report.pruned),
        pruned: cleaned.report.prune_count,
    })
}

/// [`ablation_row`] for each seed, with `spec.seed` replaced.
pub fn ablation(spec: &SyntheticSpec, seeds: &[u64], cfg: &AblationConfig) -> Result<Ablation> {
    let rows = seeds
        .iter()
        .map(|&seed| {
            let spec = SyntheticSpec { seed, ..spec.clone() };
            ablation_row(&spec, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ablation { rows })
}

/// R@k of each recall channel alone and merged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecall {
    pub seed: u64,
    pub exact: f64,
    pub embed: f64,
    pub merged: f64,
}

/// Channel-alone and merged recall at `k`, with the merged list capped at `k`.
pub fn channel_recall(spec: &SyntheticSpec, k: usize, recall_cfg: &RecallConfig) -> Result<ChannelRecall> {
    let cfg = RecallConfig {
        n: k,
        ..recall_cfg.clone()
    };
    let bench = Bench::build(spec, &cfg)?;
    let n = bench.encoded.len();
    let exact: Vec<Vec<Candidate>> = exec::map_range(n, |q| {
        let e = &bench.encoded[q];
        bench.indexes.lexical.search(&e.stem, &e.concepts, Some(q), k)
    });
    let embed = exec::map_range(n, |q| bench.indexes.vector.search(bench.embeddings[q].as_slice(), Some(q), k))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelRecall {
        seed: spec.seed,
        exact: bench.recall_at(&exact, k)?,
        embed: bench.recall_at(&embed, k)?,
        merged: bench.recall_at(&bench.candidates, k)?,
    })
}
