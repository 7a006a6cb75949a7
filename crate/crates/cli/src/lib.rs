//! Orchestration for the `lotto` binary: configuration, the pipeline
//! commands, manifests and report rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod report;

pub use commands::{run, Command, Context, Outcome, RunOptions};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
