//! Experiment harness for the federated variational inference simulator:
//! config files, the `generate`/`train`/`ablate`/`bound`/`eval` commands
//! and their CSV and JSON outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use config::{ConfigError, DataSource, ExperimentConfig, Overrides};
pub use error::CliError;
