//! Pipeline configuration: artifact paths plus every stage's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conflearn::ClConfig;
use crate::error::{Error, Result};
use crate::esrm::{FineTuneConfig, PretrainConfig};
use crate::ranking::RankConfig;
use crate::recall::{LogisticConfig, RecallConfig};
use crate::rerank::RerankConfig;

use super::eval::{DEFAULT_PRECISION_KS, DEFAULT_RECALL_K};

/// Artifact locations. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub pairs: PathBuf,
    /// Optional ground-truth groups (`id -> group`), used by eval when present.
    pub groups: PathBuf,
    pub vocab: PathBuf,
    pub pretrained: PathBuf,
    pub encoder: PathBuf,
    pub index: PathBuf,
    pub dedup: PathBuf,
    pub ranker: PathBuf,
    pub variant: PathBuf,
    pub clean_report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self::under("artifacts")
    }
}

impl Paths {
    /// Default file names under `dir`.
    pub fn under(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            corpus: d.join("corpus.snap"),
            pairs: d.join("pairs.jsonl"),
            groups: d.join("groups.json"),
            vocab: d.join("vocab.json"),
            pretrained: d.join("pretrained.esrm"),
            encoder: d.join("encoder.esrm"),
            index: d.join("index.snap"),
            dedup: d.join("dedup.clf"),
            ranker: d.join("ranker.snap"),
            variant: d.join("variant.clf"),
            clean_report: d.join("clean_report.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    /// Bank exercises perturbed into training pairs.
    pub anchors: usize,
    pub seed: u64,
    pub logistic: LogisticConfig,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            anchors: 200,
            seed: 7,
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub recall_k: usize,
    pub precision_ks: Vec<usize>,
    /// Evaluate every `query_stride`-th annotated exercise.
    pub query_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recall_k: DEFAULT_RECALL_K,
            precision_ks: DEFAULT_PRECISION_KS.to_vec(),
            query_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    /// Result cache entries; 0 disables the cache.
    pub cache_size: usize,
    /// Requests arriving within this window run as one batch.
    pub batch_window_ms: u64,
    pub max_batch: usize,
    /// Pending requests beyond this are rejected with 429.
    pub queue_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            cache_size: 1024,
            batch_window_ms: 10,
            max_batch: 64,
            queue_capacity: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub min_count: usize,
    pub stop_words: Vec<String>,
    pub pretrain: PretrainConfig,
    pub finetune: FineTuneConfig,
    pub recall: RecallConfig,
    pub dedup: DedupConfig,
    pub rank: RankConfig,
    pub cl: ClConfig,
    pub rerank: RerankConfig,
    pub variant: LogisticConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            min_count: 1,
            stop_words: Vec::new(),
            pretrain: PretrainConfig::default(),
            finetune: FineTuneConfig::default(),
            recall: RecallConfig::default(),
            dedup: DedupConfig::default(),
            rank: RankConfig::default(),
            cl: ClConfig::default(),
            rerank: RerankConfig::default(),
            variant: LogisticConfig::default(),
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = crate::config::load(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = crate::config::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        crate::config::to_string(self)
    }

    /// Hash of every setting that can change results; artifact paths excluded.
    pub fn result_hash(&self) -> Result<String> {
        let cfg = Self {
            paths: Paths::under(""),
            ..self.clone()
        };
        super::eval::config_hash(&cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.rank.validate()?;
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be positive".into()));
        }
        if self.recall.n == 0 {
            return Err(Error::Config("recall.n must be positive".into()));
        }
        if self.eval.precision_ks.is_empty() || self.eval.precision_ks.contains(&0) {
            return Err(Error::Config("eval.precision_ks must be positive".into()));
        }
        if self.eval.query_stride == 0 {
            return Err(Error::Config("eval.query_stride must be positive".into()));
        }
        if self.service.max_batch == 0 || self.service.queue_capacity == 0 {
            return Err(Error::Config("service.max_batch and queue_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = PipelineConfig::from_toml(
            "[paths]\ncorpus = \"x/c.snap\"\n[service]\nport = 9000\n[rank]\nepochs = 1\n",
        )
        .unwrap();
        assert_eq!(cfg.paths.corpus, PathBuf::from("x/c.snap"));
        assert_eq!(cfg.paths.vocab, Paths::default().vocab);
        assert_eq!((cfg.service.port, cfg.service.batch_window_ms), (9000, 10));
        assert_eq!(cfg.rank.epochs, 1);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml("prot = 1").is_err());
        assert!(PipelineConfig::from_toml("[eval]\nprecision_ks = [0]").is_err());
        assert!(PipelineConfig::from_toml("[rank]\nlr = -1.0").is_err());
    }
}
