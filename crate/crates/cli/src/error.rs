use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("invariant failure: {0}")]
    Invariant(String),

    #[error("model error: {0}")]
    Model(#[from] cdm::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(path: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{path}: {msg}"))
    }

    /// 2 config, 3 ingestion, 4 invariant failure or numerical degeneracy.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Ingest(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Model(cdm::Error::Degenerate(_)) => 4,
            CliError::Model(cdm::Error::Arbitrage(_) | cdm::Error::Parse(_) | cdm::Error::Csv(_)) => 3,
            CliError::Model(_) => 4,
            CliError::Io(_) | CliError::Json(_) => 1,
        }
    }
}

impl From<&CliError> for ExitCode {
    fn from(e: &CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
