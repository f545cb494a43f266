//! Command-line driver and HTTP service over the core pipeline.

pub mod commands;
pub mod server;
