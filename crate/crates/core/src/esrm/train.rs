use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Exercise, LabeledPair, MetaSchema};
use crate::error::{Error, Result};
use crate::exec;
use crate::params::Parameters;
use crate::textnorm::{encode_metadata, MetadataTargets, TextNormalizer, Vocab, UNK};

use super::encoder::{Embedding, EncodeCache, EncoderParams, Pooling};
use super::loss::{contrastive_loss, contrastive_with_negatives, metadata_task_loss};

/// Model-ready view of one exercise.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExercise {
    pub id: String,
    /// Stem and options.
    pub stem: Vec<u32>,
    /// Answer and analysis.
    pub analysis: Vec<u32>,
    /// Canonical formula tokens of the stem and options.
    pub formula: Vec<u32>,
    /// Sorted, deduplicated knowledge concept ids.
    pub concepts: Vec<u32>,
    pub targets: MetadataTargets,
    /// First image of the exercise, if any.
    pub image: Option<Vec<f64>>,
}

fn or_unk(ids: Vec<u32>) -> Vec<u32> {
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

pub fn encode_exercise(
    ex: &Exercise,
    schema: &MetaSchema,
    normalizer: &TextNormalizer,
    vocab: &Vocab,
) -> Result<EncodedExercise> {
    let stem_text = ex.stem_text();
    let mut concepts = ex.metadata.knowledge_concepts.clone();
    concepts.sort_unstable();
    concepts.dedup();
    Ok(EncodedExercise {
        id: ex.id.clone(),
        stem: or_unk(normalizer.encode(&stem_text, vocab).ids),
        analysis: or_unk(normalizer.encode(&ex.analysis_text(), vocab).ids),
        formula: normalizer
            .formula_tokens(&stem_text)
            .iter()
            .map(|t| vocab.id(t))
            .collect(),
        concepts,
        targets: encode_metadata(&ex.metadata, schema)?,
        image: ex.image_features.first().cloned(),
    })
}

/// Vocabulary over the normalized stems and analyses of `corpus`.
pub fn corpus_vocab(corpus: &Corpus, normalizer: &TextNormalizer, min_count: usize) -> Vocab {
    let docs: Vec<Vec<String>> = corpus
        .iter()
        .map(|e| {
            let mut t = normalizer.tokens(&e.stem_text());
            t.extend(normalizer.tokens(&e.analysis_text()));
            t
        })
        .collect();
    Vocab::build(&docs, min_count)
}

pub fn encode_corpus(
    corpus: &Corpus,
    normalizer: &TextNormalizer,
    vocab: &Vocab,
) -> Result<Vec<EncodedExercise>> {
    corpus
        .iter()
        .map(|ex| encode_exercise(ex, corpus.schema(), normalizer, vocab))
        .collect()
}

/// Stem embeddings of every exercise, in input order.
pub fn embed_all(encoded: &[EncodedExercise], params: &EncoderParams) -> Result<Vec<Embedding>> {
    exec::map_collect(encoded, |e| super::encoder::embed_text(&e.stem, params))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub w_contrastive: f64,
    pub w_type: f64,
    pub w_difficulty: f64,
    pub w_concept: f64,
    pub w_image: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 20,
            lr: 0.05,
            batch_size: 32,
            tau: 0.1,
            seed: 7,
            w_contrastive: 1.0,
            w_type: 0.5,
            w_difficulty: 0.5,
            w_concept: 0.5,
            w_image: 0.5,
        }
    }
}

impl PretrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 2".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("lr and tau must be positive".into()));
        }
        Ok(())
    }
}

/// Mean losses over the batches of one epoch (or a single batch).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub contrastive: f64,
    pub exercise_type: f64,
    pub difficulty: f64,
    pub concepts: f64,
    pub image: f64,
    pub total: f64,
}

impl EpochLoss {
    fn add_scaled(&mut self, other: &EpochLoss, s: f64) {
        self.contrastive += s * other.contrastive;
        self.exercise_type += s * other.exercise_type;
        self.difficulty += s * other.difficulty;
        self.concepts += s * other.concepts;
        self.image += s * other.image;
        self.total += s * other.total;
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    pub history: Vec<EpochLoss>,
}

/// Weighted multi-task loss of one batch and its gradient.
pub fn pretrain_batch_loss(
    params: &EncoderParams,
    batch: &[&EncodedExercise],
    cfg: &PretrainConfig,
) -> Result<(EpochLoss, EncoderParams)> {
    let b = batch.len();
    let stems: Vec<EncodeCache> = batch
        .iter()
        .map(|e| params.encode(&e.stem, Pooling::Sum))
        .collect::<Result<_>>()?;
    let analyses: Vec<EncodeCache> = batch
        .iter()
        .map(|e| params.encode(&e.analysis, Pooling::Sum))
        .collect::<Result<_>>()?;
    let e_s: Vec<&[f64]> = stems.iter().map(|c| c.output.as_slice()).collect();
    let e_a: Vec<&[f64]> = analyses.iter().map(|c| c.output.as_slice()).collect();

    let mut grads = params.zeros_like();
    let mut loss = EpochLoss::default();
    let mut g_stem: Vec<Vec<f64>> = vec![vec![0.0; params.dim()]; b];
    let mut g_analysis = g_stem.clone();

    let con = contrastive_loss(&e_s, &e_a, cfg.tau)?;
    loss.contrastive = con.loss;
    for i in 0..b {
        crate::linalg::axpy(cfg.w_contrastive, &con.grad_anchors[i], &mut g_stem[i]);
        crate::linalg::axpy(
            cfg.w_contrastive,
            &con.grad_positives[i],
            &mut g_analysis[i],
        );
    }

    let inv_b = 1.0 / b as f64;
    let weights = [
        cfg.w_type * inv_b,
        cfg.w_difficulty * inv_b,
        cfg.w_concept * inv_b,
    ];
    for (i, ex) in batch.iter().enumerate() {
        let (m, g) = metadata_task_loss(e_s[i], &ex.targets, params, weights, &mut grads)?;
        loss.exercise_type += m.exercise_type * inv_b;
        loss.difficulty += m.difficulty * inv_b;
        loss.concepts += m.concepts * inv_b;
        crate::linalg::axpy(1.0, &g, &mut g_stem[i]);
    }

    let with_image: Vec<usize> = (0..b).filter(|&i| batch[i].image.is_some()).collect();
    if with_image.len() >= 2 && cfg.w_image != 0.0 {
        let images = with_image
            .iter()
            .map(|&i| params.project(batch[i].image.as_deref().unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        let anchors: Vec<&[f64]> = with_image.iter().map(|&i| e_s[i]).collect();
        let h: Vec<&[f64]> = images.iter().map(|c| c.output.as_slice()).collect();
        let img = contrastive_loss(&anchors, &h, cfg.tau)?;
        loss.image = img.loss;
        for (k, &i) in with_image.iter().enumerate() {
            crate::linalg::axpy(cfg.w_image, &img.grad_anchors[k], &mut g_stem[i]);
            let g: Vec<f64> = img.grad_positives[k]
                .iter()
                .map(|x| x * cfg.w_image)
                .collect();
            params.project_backward(&images[k], &g, &mut grads);
        }
    }

    for i in 0..b {
        params.encode_backward(&stems[i], &g_stem[i], &mut grads);
        params.encode_backward(&analyses[i], &g_analysis[i], &mut grads);
    }
    loss.total = cfg.w_contrastive * loss.contrastive
        + cfg.w_type * loss.exercise_type
        + cfg.w_difficulty * loss.difficulty
        + cfg.w_concept * loss.concepts
        + cfg.w_image * loss.image;
    Ok((loss, grads))
}

/// Splits `order` into chunks of `size`, folding a trailing singleton into the
/// previous chunk so every batch has in-batch negatives.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() >= 2 && out[out.len() - 1].len() == 1 {
        out.pop();
        let start = (out.len() - 1) * size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

/// Multi-modal multi-task pretraining with plain SGD.
pub fn pretrain(
    mut params: EncoderParams,
    encoded: &[EncodedExercise],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if encoded.len() < 2 {
        return Err(Error::InvalidArgument(
            "pretraining needs at least 2 exercises".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let chunks = batches(&order, cfg.batch_size);
        let mut mean = EpochLoss::default();
        for chunk in &chunks {
            let batch: Vec<&EncodedExercise> = chunk.iter().map(|&i| &encoded[i]).collect();
            let (loss, grads) = pretrain_batch_loss(&params, &batch, cfg)?;
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite pretraining loss in epoch {epoch}: {loss:?}"
                )));
            }
            params.sgd_step(&grads, cfg.lr);
            mean.add_scaled(&loss, 1.0 / chunks.len() as f64);
        }
        log::debug!("pretrain epoch {epoch}: {mean:?}");
        history.push(mean);
    }
    Ok(PretrainOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            batch_size: 16,
            negatives: 8,
            tau: 0.1,
            seed: 7,
        }
    }
}

/// Anchor and positive, as positions in the encoded bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub anchor: usize,
    pub positive: usize,
}

/// One fine-tuning example with its sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneItem {
    pub pair: TrainingPair,
    pub negatives: Vec<usize>,
}

/// Deterministic source of fine-tuning batches.
#[derive(Debug, Clone)]
pub struct FineTuner<'a> {
    encoded: &'a [EncodedExercise],
    pairs: Vec<TrainingPair>,
    similars: Vec<HashSet<usize>>,
    cfg: FineTuneConfig,
}

impl<'a> FineTuner<'a> {
    /// Uses every pair labeled similar, in both directions.
    pub fn new(
        encoded: &'a [EncodedExercise],
        labeled: &[LabeledPair],
        cfg: FineTuneConfig,
    ) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.negatives == 0 {
            return Err(Error::InvalidArgument(
                "batch size and negative count must be positive".into(),
            ));
        }
        let index: HashMap<&str, usize> = encoded
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        let position = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::NotFound(format!("exercise {id:?}")))
        };
        let mut pairs = Vec::new();
        let mut similars = vec![HashSet::new(); encoded.len()];
        for p in labeled.iter().filter(|p| p.label.is_similar()) {
            let (a, b) = (position(&p.a_id)?, position(&p.b_id)?);
            if a == b {
                continue;
            }
            similars[a].insert(b);
            similars[b].insert(a);
            pairs.push(TrainingPair {
                anchor: a,
                positive: b,
            });
            pairs.push(TrainingPair {
                anchor: b,
                positive: a,
            });
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "fine-tuning needs at least one similar pair".into(),
            ));
        }
        Ok(Self {
            encoded,
            pairs,
            similars,
            cfg,
        })
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.pairs
    }

    fn sample_negatives(&self, anchor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let excluded = &self.similars[anchor];
        let available = self.encoded.len() - 1 - excluded.len();
        let k = self.cfg.negatives.min(available);
        let mut chosen = Vec::with_capacity(k);
        while chosen.len() < k {
            let j = rng.random_range(0..self.encoded.len());
            if j != anchor && !excluded.contains(&j) && !chosen.contains(&j) {
                chosen.push(j);
            }
        }
        chosen
    }

    /// Shuffled batches for `epoch`; identical for a given seed and epoch.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<FineTuneItem>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch);
        let mut order = self.pairs.clone();
        order.shuffle(&mut rng);
        order
            .chunks(self.cfg.batch_size)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&pair| FineTuneItem {
                        pair,
                        negatives: self.sample_negatives(pair.anchor, &mut rng),
                    })
                    .filter(|item| !item.negatives.is_empty())
                    .collect::<Vec<_>>()
            })
            .filter(|b| !b.is_empty())
            .collect()
    }

    /// Mean contrastive loss of `batch` over stem embeddings, with gradients.
    pub fn batch_loss(
        &self,
        params: &EncoderParams,
        batch: &[FineTuneItem],
    ) -> Result<(f64, EncoderParams)> {
        let mut grads = params.zeros_like();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let encode = |i: usize| params.encode(&self.encoded[i].stem, Pooling::Sum);
        for item in batch {
            let anchor = encode(item.pair.anchor)?;
            let positive = encode(item.pair.positive)?;
            let negatives = item
                .negatives
                .iter()
                .map(|&j| encode(j))
                .collect::<Result<Vec<_>>>()?;
            let neg_out: Vec<&[f64]> = negatives.iter().map(|c| c.output.as_slice()).collect();
            let out = contrastive_with_negatives(
                &anchor.output,
                &positive.output,
                &neg_out,
                self.cfg.tau,
            )?;
            total += out.loss * scale;
            let scaled = |g: &[f64]| g.iter().map(|x| x * scale).collect::<Vec<_>>();
            params.encode_backward(&anchor, &scaled(&out.grad_anchor), &mut grads);
            params.encode_backward(&positive, &scaled(&out.grad_positive), &mut grads);
            for (c, g) in negatives.iter().zip(&out.grad_negatives) {
                params.encode_backward(c, &scaled(g), &mut grads);
            }
        }
        Ok((total, grads))
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub params: EncoderParams,
    /// Loss of the very first batch, evaluated before any update.
    pub first_batch_loss: Option<f64>,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
}

/// Supervised contrastive fine-tuning on similar pairs with random negatives.
pub fn fine_tune(
    mut params: EncoderParams,
    encoded: &[EncodedExercise],
    labeled: &[LabeledPair],
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    let tuner = FineTuner::new(encoded, labeled, cfg.clone())?;
    let mut first_batch_loss = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = tuner.epoch_batches(epoch as u64);
        let mut mean = 0.0;
        for batch in &batches {
            let (loss, grads) = tuner.batch_loss(&params, batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite fine-tuning loss in epoch {epoch}"
                )));
            }
            first_batch_loss.get_or_insert(loss);
            params.sgd_step(&grads, cfg.lr);
            mean += loss / batches.len() as f64;
        }
        log::debug!("fine-tune epoch {epoch}: {mean}");
        history.push(mean);
    }
    Ok(FineTuneOutcome {
        params,
        first_batch_loss,
        history,
    })
}

/// Writes `id v_1 ... v_d` per exercise. Values use the shortest decimal form
/// that parses back to the identical float.
pub fn export_embeddings(
    encoded: &[EncodedExercise],
    params: &EncoderParams,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let embeddings = embed_all(encoded, params)?;
    let mut out = String::new();
    for (ex, e) in encoded.iter().zip(&embeddings) {
        out.push_str(&ex.id);
        for v in e.as_slice() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic as generate, SyntheticSpec};
    use crate::esrm::encoder::ModelShape;
    use crate::gradcheck::{self, DEFAULT_REL_TOL, DEFAULT_STEP};

    fn tiny_encoded() -> (Vec<EncodedExercise>, ModelShape) {
        let exercise = |id: &str, stem: Vec<u32>, analysis: Vec<u32>, t: usize, image: bool| {
            let mut exercise_type = vec![0.0; 2];
            exercise_type[t] = 1.0;
            EncodedExercise {
                id: id.into(),
                stem,
                analysis,
                formula: Vec::new(),
                concepts: vec![0, 1],
                targets: MetadataTargets {
                    exercise_type,
                    difficulty: vec![0.0, 1.0, 0.0],
                    concepts: vec![0.5, 0.5, 0.0],
                },
                image: image.then(|| vec![0.3 * t as f64 - 0.2, 0.5, -0.4]),
            }
        };
        let encoded = vec![
            exercise("a", vec![3, 4, 5], vec![6, 7], 0, true),
            exercise("b", vec![4, 8], vec![9, 3, 3], 1, true),
            exercise("c", vec![10, 5], vec![11], 1, false),
        ];
        let shape = ModelShape {
            dim: 5,
            vocab_size: 12,
            image_dim: 3,
            n_types: 2,
            n_difficulty: 3,
            n_concepts: 3,
        };
        (encoded, shape)
    }

    #[test]
    fn pretrain_batch_gradient_matches_finite_differences() {
        let (encoded, shape) = tiny_encoded();
        let mut params = EncoderParams::init(shape, 4).unwrap();
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= 10.0);
        }
        let batch: Vec<&EncodedExercise> = encoded.iter().collect();
        let cfg = PretrainConfig {
            w_type: 0.3,
            w_image: 0.7,
            ..PretrainConfig::default()
        };
        let (_, grads) = pretrain_batch_loss(&params, &batch, &cfg).unwrap();
        let report = gradcheck::check(&params, &grads, DEFAULT_STEP, DEFAULT_REL_TOL, |q| {
            pretrain_batch_loss(q, &batch, &cfg).unwrap().0.total
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn fine_tune_batch_gradient_matches_finite_differences() {
        let (encoded, shape) = tiny_encoded();
        let mut params = EncoderParams::init(shape, 9).unwrap();
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= 10.0);
        }
        let labeled = vec![LabeledPair::new("a", "b", crate::corpus::Label::Similar)];
        let tuner = FineTuner::new(&encoded, &labeled, FineTuneConfig::default()).unwrap();
        let batch = &tuner.epoch_batches(0)[0];
        assert!(batch.iter().all(|item| item.negatives == vec![2]));
        let (_, grads) = tuner.batch_loss(&params, batch).unwrap();
        let report = gradcheck::check(&params, &grads, DEFAULT_STEP, DEFAULT_REL_TOL, |q| {
            tuner.batch_loss(q, batch).unwrap().0
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn singleton_tail_is_folded() {
        let order: Vec<usize> = (0..7).collect();
        let b = batches(&order, 3);
        assert_eq!(b, vec![&order[0..3], &order[3..7]]);
        assert_eq!(batches(&order[..6], 3).len(), 2);
    }

    fn synthetic(
        n_templates: usize,
        per_template: usize,
    ) -> (Vec<EncodedExercise>, Vec<LabeledPair>, ModelShape) {
        let data = generate(&SyntheticSpec {
            n_templates,
            per_template,
            noise_rate: 0.0,
            n_pairs: n_templates * per_template,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let normalizer = TextNormalizer::default();
        let vocab = corpus_vocab(&data.corpus, &normalizer, 1);
        let encoded = encode_corpus(&data.corpus, &normalizer, &vocab).unwrap();
        let shape = ModelShape::for_schema(data.corpus.schema(), vocab.len(), 16);
        (encoded, data.pairs, shape)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (encoded, pairs, shape) = synthetic(4, 5);
        let init = EncoderParams::init(shape, 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let out = pretrain(init.clone(), &encoded, &cfg).unwrap();
        assert_eq!(out.params, init);
        assert!(out.history.is_empty());
        let ft = FineTuneConfig {
            epochs: 0,
            ..FineTuneConfig::default()
        };
        let tuned = fine_tune(init.clone(), &encoded, &pairs, &ft).unwrap();
        assert_eq!(tuned.params, init);
        assert_eq!(tuned.first_batch_loss, None);
    }

    #[test]
    fn pretraining_is_deterministic_and_reduces_contrastive_loss() {
        let (encoded, _, shape) = synthetic(6, 10);
        let cfg = PretrainConfig {
            epochs: 5,
            dim: 16,
            ..PretrainConfig::default()
        };
        let init = EncoderParams::init(shape, cfg.seed).unwrap();
        let a = pretrain(init.clone(), &encoded, &cfg).unwrap();
        let b = pretrain(init, &encoded, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert!(a.history.last().unwrap().contrastive < a.history[0].contrastive);
    }

    #[test]
    fn fine_tune_first_batch_matches_direct_evaluation() {
        let (encoded, pairs, shape) = synthetic(4, 8);
        let params = EncoderParams::init(shape, 2).unwrap();
        let cfg = FineTuneConfig {
            epochs: 1,
            ..FineTuneConfig::default()
        };
        let out = fine_tune(params.clone(), &encoded, &pairs, &cfg).unwrap();
        let tuner = FineTuner::new(&encoded, &pairs, cfg).unwrap();
        let batch = &tuner.epoch_batches(0)[0];
        let (direct, _) = tuner.batch_loss(&params, batch).unwrap();
        assert_eq!(out.first_batch_loss, Some(direct));
    }

    #[test]
    fn negatives_exclude_anchor_and_similars() {
        let (encoded, pairs, _) = synthetic(4, 8);
        let tuner = FineTuner::new(&encoded, &pairs, FineTuneConfig::default()).unwrap();
        for batch in tuner.epoch_batches(3) {
            for item in batch {
                assert!(!item.negatives.contains(&item.pair.anchor));
                assert!(!item.negatives.contains(&item.pair.positive));
                assert!(item
                    .negatives
                    .iter()
                    .all(|n| !tuner.similars[item.pair.anchor].contains(n)));
                let unique: HashSet<_> = item.negatives.iter().collect();
                assert_eq!(unique.len(), item.negatives.len());
            }
        }
        let no_positives: Vec<LabeledPair> = pairs
            .iter()
            .filter(|p| !p.label.is_similar())
            .cloned()
            .collect();
        assert!(FineTuner::new(&encoded, &no_positives, FineTuneConfig::default()).is_err());
    }

    #[test]
    fn export_round_trips_bit_for_bit() {
        let (encoded, _, shape) = synthetic(3, 4);
        let params = EncoderParams::init(shape, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        export_embeddings(&encoded, &params, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), encoded.len());
        let embeddings = embed_all(&encoded, &params).unwrap();
        for ((line, ex), e) in lines.iter().zip(&encoded).zip(&embeddings) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(fields.len(), 17);
            assert_eq!(fields[0], ex.id);
            let values: Vec<f64> = fields[1..].iter().map(|f| f.parse().unwrap()).collect();
            assert_eq!(values.as_slice(), e.as_slice());
        }
        let path2 = dir.path().join("emb2.txt");
        export_embeddings(&encoded, &params, &path2).unwrap();
        assert_eq!(text, std::fs::read_to_string(&path2).unwrap());
    }

    #[test]
    fn config_parses_flat_keys() {
        let cfg: PretrainConfig = crate::config::from_str("epochs = 3\nlr = 0.1\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 32);
        assert!(crate::config::from_str::<PretrainConfig>("nope = 1").is_err());
    }
}
