//! Experiment runner: config handling and the subcommands behind the
//! `maskdistill` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
