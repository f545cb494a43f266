//! Loaded pipeline: recall, rank and re-rank over immutable snapshots, with a
//! result cache and order-preserving batch execution.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_snapshot, Corpus, Exercise};
use crate::error::{Error, Result};
use crate::esrm::{embed_text, encode_corpus, encode_exercise, EncodedExercise, EncoderParams};
use crate::exec;
use crate::ranking::{rank, RankerParams};
use crate::recall::{
    detect_duplicate, recall, Candidate, PairClassifier, PairSide, RecallConfig, RecallIndexes,
    RecallQuery,
};
use crate::rerank::{rerank, RerankContext, RerankQuery, RerankedResult, StudentProfile};
use crate::textnorm::{TextNormalizer, Vocab};

use super::config::PipelineConfig;
use super::eval::{eval_precision_at_k, eval_recall_at_k, hex, EvalReport, Judged};
use super::stages::normalizer;

/// A bank exercise by id, or an exercise supplied inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTarget {
    Id(String),
    Exercise(Box<Exercise>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarRequest {
    #[serde(flatten)]
    pub target: QueryTarget,
    #[serde(default)]
    pub profile: Option<StudentProfile>,
}

impl SimilarRequest {
    pub fn by_id(id: impl Into<String>, profile: Option<StudentProfile>) -> Self {
        Self {
            target: QueryTarget::Id(id.into()),
            profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateVerdict {
    pub duplicate: bool,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub result: Arc<RerankedResult>,
    pub cache_hit: bool,
}

/// Content hashes of the loaded snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotVersions {
    pub files: BTreeMap<String, String>,
    /// Hash over all of `files`.
    pub combined: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    query: String,
    profile: Option<StudentProfile>,
    version: Arc<str>,
}

/// Query-side views of one exercise.
struct Resolved<'a> {
    encoded: Cow<'a, EncodedExercise>,
    embedding: Cow<'a, [f64]>,
    position: Option<usize>,
    difficulty: u8,
}

impl Resolved<'_> {
    fn side(&self) -> PairSide<'_> {
        PairSide {
            embedding: &self.embedding,
            tokens: &self.encoded.stem,
            formula: &self.encoded.formula,
        }
    }
}

pub struct Engine {
    cfg: PipelineConfig,
    normalizer: TextNormalizer,
    corpus: Corpus,
    vocab: Vocab,
    encoded: Vec<EncodedExercise>,
    encoder: EncoderParams,
    indexes: RecallIndexes,
    dedup: PairClassifier,
    ranker: RankerParams,
    variant: Option<PairClassifier>,
    versions: SnapshotVersions,
    version_key: Arc<str>,
    cache: Option<Mutex<LruCache<CacheKey, Arc<RerankedResult>>>>,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl Engine {
    /// Loads every snapshot the query path needs. Missing files are reported
    /// together; size or shape disagreements are version errors.
    pub fn load(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let p = &cfg.paths;
        let mut required = vec![
            ("corpus", &p.corpus),
            ("vocab", &p.vocab),
            ("encoder", &p.encoder),
            ("index", &p.index),
            ("dedup", &p.dedup),
            ("ranker", &p.ranker),
        ];
        if cfg.rerank.enable_variant {
            required.push(("variant", &p.variant));
        }
        let missing: Vec<String> = required
            .iter()
            .filter(|(_, path)| !path.exists())
            .map(|(name, path)| format!("{name} ({})", path.display()))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing snapshots: {}", missing.join(", "))));
        }
        let mut files = BTreeMap::new();
        for (name, path) in &required {
            files.insert(name.to_string(), file_hash(path)?);
        }
        let combined = hex(&Sha256::digest(serde_json::to_vec(&files)?));
        let corpus = load_snapshot(&p.corpus)?;
        let vocab = Vocab::load(&p.vocab)?;
        let encoder = EncoderParams::load(&p.encoder)?;
        let indexes = RecallIndexes::load(&p.index)?;
        let dedup = PairClassifier::load(&p.dedup)?;
        let ranker = RankerParams::load(&p.ranker)?;
        let variant = if cfg.rerank.enable_variant {
            Some(PairClassifier::load(&p.variant)?)
        } else {
            None
        };
        let normalizer = normalizer(&cfg);
        let encoded = encode_corpus(&corpus, &normalizer, &vocab)?;
        let ids_match = indexes.vector.ids().iter().zip(corpus.iter()).all(|(a, e)| *a == e.id);
        if indexes.vector.len() != corpus.len() || !ids_match {
            return Err(Error::Version("index was built over a different corpus".into()));
        }
        if encoder.shape.vocab_size != vocab.len() || ranker.encoder.shape.vocab_size != vocab.len() {
            return Err(Error::Version("encoder vocabulary differs from the vocab snapshot".into()));
        }
        if indexes.vector.dim() != encoder.dim() {
            return Err(Error::Version("index dimension differs from the encoder".into()));
        }
        let cache = NonZeroUsize::new(cfg.service.cache_size).map(|n| Mutex::new(LruCache::new(n)));
        Ok(Self {
            version_key: Arc::from(combined.as_str()),
            versions: SnapshotVersions { files, combined },
            cfg,
            normalizer,
            corpus,
            vocab,
            encoded,
            encoder,
            indexes,
            dedup,
            ranker,
            variant,
            cache,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn versions(&self) -> &SnapshotVersions {
        &self.versions
    }

    fn resolve<'a>(&'a self, target: &QueryTarget) -> Result<Resolved<'a>> {
        match target {
            QueryTarget::Id(id) => {
                let i = self
                    .corpus
                    .position(id)
                    .ok_or_else(|| Error::NotFound(format!("exercise {id:?}")))?;
                Ok(Resolved {
                    encoded: Cow::Borrowed(&self.encoded[i]),
                    embedding: Cow::Borrowed(self.indexes.vector.row(i)),
                    position: Some(i),
                    difficulty: self.corpus[i].metadata.difficulty,
                })
            }
            QueryTarget::Exercise(ex) => {
                let enc = encode_exercise(ex, self.corpus.schema(), &self.normalizer, &self.vocab)?;
                let emb = embed_text(&enc.stem, &self.encoder)?.into_inner();
                Ok(Resolved {
                    encoded: Cow::Owned(enc),
                    embedding: Cow::Owned(emb),
                    position: None,
                    difficulty: ex.metadata.difficulty,
                })
            }
        }
    }

    fn recall_for(&self, q: &Resolved, cfg: &RecallConfig) -> Result<Vec<Candidate>> {
        let query = RecallQuery {
            exercise: &q.encoded,
            embedding: &q.embedding,
            position: q.position,
        };
        recall(&query, &self.indexes, &self.encoded, Some(&self.dedup), cfg)
    }

    fn ranked_for(&self, q: &Resolved) -> Result<Vec<Candidate>> {
        let candidates = self.recall_for(q, &self.cfg.recall)?;
        rank(&q.encoded, &candidates, &self.encoded, &self.ranker)
    }

    /// Recall, rank and re-rank without touching the cache.
    pub fn query_uncached(&self, req: &SimilarRequest) -> Result<RerankedResult> {
        let q = self.resolve(&req.target)?;
        let ranked = self.ranked_for(&q)?;
        let ctx = RerankContext {
            exercises: self.corpus.exercises(),
            encoded: &self.encoded,
            embeddings: &self.indexes.vector,
        };
        let rq = RerankQuery {
            side: q.side(),
            difficulty: q.difficulty,
        };
        rerank(&rq, &ranked, &ctx, req.profile.as_ref(), self.variant.as_ref(), &self.cfg.rerank)
    }

    fn cache_key(&self, req: &SimilarRequest) -> Result<CacheKey> {
        let query = match &req.target {
            QueryTarget::Id(id) => format!("id:{id}"),
            QueryTarget::Exercise(ex) => {
                format!("ex:{}", hex(&Sha256::digest(serde_json::to_vec(ex)?)))
            }
        };
        Ok(CacheKey {
            query,
            profile: req.profile,
            version: self.version_key.clone(),
        })
    }

    pub fn query(&self, req: &SimilarRequest) -> Result<QueryOutcome> {
        self.query_batch(std::slice::from_ref(req)).pop().expect("one result per request")
    }

    /// Serves cached requests from the cache and computes the rest as one
    /// data-parallel unit. Results come back in request order and equal what
    /// [`Engine::query_uncached`] returns for each request alone.
    pub fn query_batch(&self, reqs: &[SimilarRequest]) -> Vec<Result<QueryOutcome>> {
        let keys: Vec<Result<CacheKey>> = reqs.iter().map(|r| self.cache_key(r)).collect();
        let mut out: Vec<Option<Result<QueryOutcome>>> = Vec::with_capacity(reqs.len());
        if let Some(cache) = &self.cache {
            let mut cache = cache.lock();
            for key in &keys {
                out.push(match key {
                    Ok(k) => cache.get(k).map(|r| {
                        Ok(QueryOutcome {
                            result: r.clone(),
                            cache_hit: true,
                        })
                    }),
                    Err(e) => Some(Err(Error::InvalidArgument(e.to_string()))),
                });
            }
        } else {
            out.resize_with(reqs.len(), || None);
        }
        let misses: Vec<usize> = (0..reqs.len()).filter(|&i| out[i].is_none()).collect();
        let computed = exec::map_collect(&misses, |&i| self.query_uncached(&reqs[i]).map(Arc::new));
        let mut fresh = Vec::new();
        for (&i, res) in misses.iter().zip(computed) {
            if let (Ok(r), Ok(k)) = (&res, &keys[i]) {
                fresh.push((k.clone(), r.clone()));
            }
            out[i] = Some(res.map(|result| QueryOutcome {
                result,
                cache_hit: false,
            }));
        }
        if let Some(cache) = &self.cache {
            let mut cache = cache.lock();
            for (k, r) in fresh {
                cache.put(k, r);
            }
        }
        out.into_iter().map(|o| o.expect("every slot filled")).collect()
    }

    /// Duplicate verdict between two exercises.
    pub fn duplicate(&self, a: &QueryTarget, b: &QueryTarget) -> Result<DuplicateVerdict> {
        let (ra, rb) = (self.resolve(a)?, self.resolve(b)?);
        let (duplicate, probability) = detect_duplicate(ra.side(), rb.side(), Some(&self.dedup))?;
        Ok(DuplicateVerdict {
            duplicate,
            probability,
        })
    }

    /// Recall@K over the recall stage and Precision@K over the rank stage, for
    /// every `query_stride`-th exercise with a non-empty relevant set.
    pub fn evaluate(&self, relevant: &[HashSet<String>]) -> Result<EvalReport> {
        if relevant.len() != self.corpus.len() {
            return Err(Error::InvalidArgument("relevance must cover the whole bank".into()));
        }
        let e = &self.cfg.eval;
        let queries: Vec<usize> = (0..self.corpus.len())
            .filter(|&i| !relevant[i].is_empty())
            .step_by(e.query_stride)
            .collect();
        let recall_cfg = RecallConfig {
            n: e.recall_k,
            k_exact: self.cfg.recall.k_exact.max(e.recall_k),
            k_embed: self.cfg.recall.k_embed.max(e.recall_k),
            ..self.cfg.recall.clone()
        };
        let judged = exec::map_collect(&queries, |&i| -> Result<(Judged, Judged)> {
            let q = self.resolve(&QueryTarget::Id(self.corpus[i].id.clone()))?;
            let ids = |c: Vec<Candidate>| c.into_iter().map(|c| c.id).collect::<Vec<_>>();
            let id = self.corpus[i].id.clone();
            let recalled = ids(self.recall_for(&q, &recall_cfg)?);
            let ranked = ids(self.ranked_for(&q)?);
            Ok((
                Judged { id: id.clone(), relevant: relevant[i].clone(), retrieved: recalled },
                Judged { id, relevant: relevant[i].clone(), retrieved: ranked },
            ))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (rec, prec): (Vec<Judged>, Vec<Judged>) = judged.into_iter().unzip();
        Ok(EvalReport::new(
            self.cfg.result_hash()?,
            Some(eval_recall_at_k(&rec, e.recall_k)?),
            Some(eval_precision_at_k(&prec, &e.precision_ks)?),
        ))
    }
}
