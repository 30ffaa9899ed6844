use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure classes with fixed process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("generator: {0}")]
    Generator(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("consistency: {0}")]
    Consistency(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Generator(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Consistency(_) => 5,
        }
    }

    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }

    pub fn io(path: &Path, msg: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
