//! Three-stage engine for finding similar exercises: recall, ranking and re-rank,
//! built on a trainable exercise embedding model.

pub mod config;
pub mod conflearn;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod esrm;
pub mod exec;
pub mod gradcheck;
pub mod linalg;
pub mod params;
pub mod ranking;
pub mod recall;
pub mod rerank;
pub mod snapshot;
pub mod textnorm;

pub use error::{Error, Result};
