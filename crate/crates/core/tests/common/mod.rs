use std::path::Path;

use fse_core::corpus::SyntheticSpec;
use fse_core::engine::{stages, Paths, PipelineConfig};

pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_templates: 6,
        per_template: 10,
        n_pairs: 240,
        noise_rate: 0.0,
        ..SyntheticSpec::default()
    }
}

/// Runs the whole synthetic pipeline into `dir` and returns its config.
pub fn trained(dir: &Path, spec: &SyntheticSpec) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        paths: Paths::under(dir),
        ..PipelineConfig::default()
    };
    cfg.pretrain.epochs = 20;
    cfg.dedup.anchors = 40;
    cfg.eval.recall_k = 20;
    stages::run_synthetic(&cfg, spec, false).unwrap();
    cfg
}
