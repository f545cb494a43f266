//! End-to-end orchestration: configuration, file-based pipeline steps, the
//! query engine with its cache and batching, evaluation metrics, and the
//! synthetic experiment harness.

mod config;
pub mod eval;
pub mod harness;
mod query;
pub mod stages;

pub use config::{DedupConfig, EvalConfig, Paths, PipelineConfig, ServiceConfig};
pub use eval::{
    config_hash, eval_precision_at_k, eval_recall_at_k, EvalReport, Judged, PrecisionReport,
    QueryPrecision, RecallReport, SeedRecall, REPORT_SCHEMA_VERSION,
};
pub use query::{
    DuplicateVerdict, Engine, QueryOutcome, QueryTarget, SimilarRequest, SnapshotVersions,
};
