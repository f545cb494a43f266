//! File-to-file pipeline steps. Each reads the artifacts it needs from
//! [`Paths`](super::Paths) and writes its own.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::conflearn::{clean_and_retrain, CleaningReport};
use crate::corpus::{
    generate_synthetic, load_corpus, load_pairs, load_snapshot, save_pairs, save_snapshot, Corpus,
    LabeledPair, SyntheticData, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::esrm::{
    corpus_vocab, embed_all, embed_text, encode_corpus, encode_exercise, export_embeddings,
    fine_tune, pretrain, EncodedExercise, EncoderParams, FineTuneOutcome, ModelShape,
    PretrainOutcome,
};
use crate::ranking::{train_ranker, RankOutcome, RankerParams};
use crate::recall::{dedup_training_set, Featurized, PairClassifier, PairMode, RecallIndexes};
use crate::rerank::{train_variant_classifier, RerankContext};
use crate::textnorm::{TextNormalizer, Vocab};

use super::config::PipelineConfig;
use super::eval::EvalReport;
use super::query::Engine;

pub fn normalizer(cfg: &PipelineConfig) -> TextNormalizer {
    TextNormalizer::new(cfg.stop_words.iter().cloned())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Corpus, vocabulary and encoded bank, as every training step needs them.
struct Bank {
    corpus: Corpus,
    encoded: Vec<EncodedExercise>,
}

fn load_bank(cfg: &PipelineConfig) -> Result<Bank> {
    let corpus = load_snapshot(&cfg.paths.corpus)?;
    let vocab = Vocab::load(&cfg.paths.vocab)?;
    let encoded = encode_corpus(&corpus, &normalizer(cfg), &vocab)?;
    Ok(Bank { corpus, encoded })
}

/// JSONL exercises into a corpus snapshot.
pub fn ingest(cfg: &PipelineConfig, jsonl: impl AsRef<Path>) -> Result<Corpus> {
    let corpus = load_corpus(jsonl)?;
    ensure_parent(&cfg.paths.corpus)?;
    save_snapshot(&corpus, &cfg.paths.corpus)?;
    Ok(corpus)
}

/// Synthetic corpus snapshot, labeled pairs and ground-truth groups.
pub fn synth(cfg: &PipelineConfig, spec: &SyntheticSpec) -> Result<SyntheticData> {
    let data = generate_synthetic(spec)?;
    ensure_parent(&cfg.paths.corpus)?;
    save_snapshot(&data.corpus, &cfg.paths.corpus)?;
    ensure_parent(&cfg.paths.pairs)?;
    save_pairs(&data.pairs, &cfg.paths.pairs)?;
    let groups: BTreeMap<&str, usize> = data
        .corpus
        .iter()
        .zip(&data.templates)
        .map(|(e, &t)| (e.id.as_str(), t))
        .collect();
    write_text(&cfg.paths.groups, &serde_json::to_string_pretty(&groups)?)?;
    Ok(data)
}

/// Builds the vocabulary and pretrains the encoder.
pub fn pretrain_step(cfg: &PipelineConfig) -> Result<PretrainOutcome> {
    let corpus = load_snapshot(&cfg.paths.corpus)?;
    let norm = normalizer(cfg);
    let vocab = corpus_vocab(&corpus, &norm, cfg.min_count);
    let encoded = encode_corpus(&corpus, &norm, &vocab)?;
    let shape = ModelShape::for_schema(corpus.schema(), vocab.len(), cfg.pretrain.dim);
    let init = EncoderParams::init(shape, cfg.pretrain.seed)?;
    let out = pretrain(init, &encoded, &cfg.pretrain)?;
    ensure_parent(&cfg.paths.vocab)?;
    vocab.save(&cfg.paths.vocab)?;
    ensure_parent(&cfg.paths.pretrained)?;
    out.params.save(&cfg.paths.pretrained)?;
    Ok(out)
}

pub fn finetune_step(cfg: &PipelineConfig) -> Result<FineTuneOutcome> {
    let bank = load_bank(cfg)?;
    let pairs = load_pairs(&cfg.paths.pairs, &bank.corpus)?;
    let init = EncoderParams::load(&cfg.paths.pretrained)?;
    let out = fine_tune(init, &bank.encoded, &pairs, &cfg.finetune)?;
    ensure_parent(&cfg.paths.encoder)?;
    out.params.save(&cfg.paths.encoder)?;
    Ok(out)
}

/// Trains the symmetric duplicate detector from perturbed bank exercises.
pub fn train_dedup(
    corpus: &Corpus,
    pairs: &[LabeledPair],
    normalizer: &TextNormalizer,
    vocab: &Vocab,
    encoder: &EncoderParams,
    cfg: &PipelineConfig,
) -> Result<PairClassifier> {
    let featurize = |ex: &crate::corpus::Exercise| {
        let enc = encode_exercise(ex, corpus.schema(), normalizer, vocab)?;
        Ok(Featurized {
            embedding: embed_text(&enc.stem, encoder)?.into_inner(),
            tokens: enc.stem,
            formula: enc.formula,
        })
    };
    let examples = dedup_training_set(corpus, pairs, featurize, cfg.dedup.anchors, cfg.dedup.seed)?;
    PairClassifier::train(PairMode::Symmetric, encoder.dim(), &examples, &cfg.dedup.logistic)
}

/// Recall indexes over the fine-tuned embeddings plus the duplicate detector.
pub fn index_step(cfg: &PipelineConfig) -> Result<RecallIndexes> {
    let corpus = load_snapshot(&cfg.paths.corpus)?;
    let vocab = Vocab::load(&cfg.paths.vocab)?;
    let norm = normalizer(cfg);
    let encoded = encode_corpus(&corpus, &norm, &vocab)?;
    let encoder = EncoderParams::load(&cfg.paths.encoder)?;
    let embeddings = embed_all(&encoded, &encoder)?;
    let indexes = RecallIndexes::build(&encoded, &embeddings, cfg.recall.bm25())?;
    ensure_parent(&cfg.paths.index)?;
    indexes.save(&cfg.paths.index)?;
    let pairs = if cfg.paths.pairs.exists() {
        load_pairs(&cfg.paths.pairs, &corpus)?
    } else {
        Vec::new()
    };
    let dedup = train_dedup(&corpus, &pairs, &norm, &vocab, &encoder, cfg)?;
    ensure_parent(&cfg.paths.dedup)?;
    dedup.save(&cfg.paths.dedup)?;
    Ok(indexes)
}

fn train_variant(cfg: &PipelineConfig, bank: &Bank, pairs: &[LabeledPair]) -> Result<()> {
    if !cfg.rerank.enable_variant {
        return Ok(());
    }
    let indexes = RecallIndexes::load(&cfg.paths.index)?;
    let ctx = RerankContext {
        exercises: bank.corpus.exercises(),
        encoded: &bank.encoded,
        embeddings: &indexes.vector,
    };
    let clf = train_variant_classifier(pairs, &ctx, &cfg.variant)?;
    ensure_parent(&cfg.paths.variant)?;
    clf.save(&cfg.paths.variant)
}

/// Multi-task ranker from the fine-tuned encoder, plus the variant classifier
/// when variant re-ranking is enabled.
pub fn train_rank_step(cfg: &PipelineConfig) -> Result<RankOutcome> {
    let bank = load_bank(cfg)?;
    let pairs = load_pairs(&cfg.paths.pairs, &bank.corpus)?;
    let init = RankerParams::init(EncoderParams::load(&cfg.paths.encoder)?, cfg.rank.seed);
    let out = train_ranker(init, &pairs, &bank.encoded, &cfg.rank)?;
    ensure_parent(&cfg.paths.ranker)?;
    out.params.save(&cfg.paths.ranker)?;
    train_variant(cfg, &bank, &pairs)?;
    Ok(out)
}

/// Confident-learning pass: prunes suspect pairs, retrains the ranker on the
/// rest and overwrites it. The report goes next to the other artifacts.
pub fn clean_step(cfg: &PipelineConfig) -> Result<CleaningReport> {
    let bank = load_bank(cfg)?;
    let pairs = load_pairs(&cfg.paths.pairs, &bank.corpus)?;
    let init = RankerParams::init(EncoderParams::load(&cfg.paths.encoder)?, cfg.rank.seed);
    let out = clean_and_retrain(&pairs, &bank.encoded, &init, &cfg.rank, &cfg.cl, None)?;
    ensure_parent(&cfg.paths.ranker)?;
    out.params.save(&cfg.paths.ranker)?;
    write_text(&cfg.paths.clean_report, &out.report.to_json()?)?;
    Ok(out.report)
}

pub fn export_embeddings_step(cfg: &PipelineConfig, out: impl AsRef<Path>) -> Result<()> {
    let bank = load_bank(cfg)?;
    let encoder = EncoderParams::load(&cfg.paths.encoder)?;
    let out = out.as_ref();
    ensure_parent(out)?;
    export_embeddings(&bank.encoded, &encoder, out)
}

/// Relevant set per bank position: ground-truth groups when the groups file
/// exists, otherwise the similar-labeled pairs.
pub fn relevance(cfg: &PipelineConfig, corpus: &Corpus) -> Result<Vec<HashSet<String>>> {
    let mut out = vec![HashSet::new(); corpus.len()];
    if cfg.paths.groups.exists() {
        let text = std::fs::read_to_string(&cfg.paths.groups).map_err(|e| Error::io(&cfg.paths.groups, e))?;
        let groups: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (id, g) in &groups {
            members.entry(*g).or_default().push(corpus.require(id)?);
        }
        for m in members.values() {
            for &i in m {
                out[i].extend(m.iter().filter(|&&j| j != i).map(|&j| corpus[j].id.clone()));
            }
        }
    } else {
        for p in load_pairs(&cfg.paths.pairs, corpus)? {
            if p.label.is_similar() {
                let (a, b) = (corpus.require(&p.a_id)?, corpus.require(&p.b_id)?);
                out[a].insert(p.b_id.clone());
                out[b].insert(p.a_id.clone());
            }
        }
    }
    Ok(out)
}

/// Recall@K after the recall stage and Precision@K after the rank stage,
/// written as JSON to `out` when given.
pub fn eval_step(cfg: &PipelineConfig, out: Option<&Path>) -> Result<EvalReport> {
    let engine = Engine::load(cfg.clone())?;
    let relevant = relevance(cfg, engine.corpus())?;
    let report = engine.evaluate(&relevant)?;
    if let Some(path) = out {
        write_text(path, &report.to_json()?)?;
    }
    Ok(report)
}

/// Every step from a synthetic spec through evaluation.
pub fn run_synthetic(cfg: &PipelineConfig, spec: &SyntheticSpec, clean: bool) -> Result<EvalReport> {
    synth(cfg, spec)?;
    pretrain_step(cfg)?;
    finetune_step(cfg)?;
    index_step(cfg)?;
    train_rank_step(cfg)?;
    if clean {
        clean_step(cfg)?;
    }
    eval_step(cfg, None)
}
