use std::io;

use fedvi_core::datagen::DataError;
use fedvi_core::federation::FedError;
use fedvi_core::model::io::CheckpointError;
use fedvi_core::model::ModelError;
use thiserror::Error;

use crate::config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Format(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

fn plain_config(msg: String) -> CliError {
    CliError::Config(ConfigError::new("", None, msg))
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => plain_config(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Config(m) => plain_config(m),
            FedError::CohortTooLarge { .. } => plain_config(e.to_string()),
            FedError::Model(m) => m.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(source) => CliError::io("dataset", source),
            DataError::Invalid(m) => plain_config(m),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(source) => CliError::io("parameter file", source),
            CheckpointError::Model(m) => CliError::Format(format!("parameter file: {m}")),
            other => CliError::Format(other.to_string()),
        }
    }
}
