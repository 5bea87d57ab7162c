use std::path::{Path, PathBuf};

use amnesic_encoder::EncoderError;
use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Config {
        message: String,
        path: Option<PathBuf>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] amnesic::Error),

    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// What goes to stderr when a command fails.
#[derive(Debug, Serialize)]
pub struct ErrorReport<'a> {
    pub kind: &'a str,
    pub message: String,
    pub path: Option<&'a Path>,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config {
            message: message.into(),
            path: None,
        }
    }

    pub fn config_at(message: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        CliError::Config {
            message: message.into(),
            path: Some(path.into()),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "ConfigError",
            CliError::Io { .. } => "IoError",
            CliError::Core(e) => e.kind(),
            CliError::Encoder(e) => e.kind(),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            CliError::Config { path, .. } => path.as_deref(),
            CliError::Io { path, .. } => Some(path),
            CliError::Core(e) => e.path(),
            CliError::Encoder(e) => e.path(),
        }
    }

    pub fn to_json(&self) -> String {
        let report = ErrorReport {
            kind: self.kind(),
            message: self.to_string(),
            path: self.path(),
        };
        serde_json::to_string(&report).expect("error report serializes")
    }
}
