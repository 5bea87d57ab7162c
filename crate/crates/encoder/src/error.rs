use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("bad grammar: {0}")]
    BadGrammar(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown token '{0}'")]
    UnknownToken(String),

    #[error("token id {id} outside a vocabulary of {size}")]
    UnknownTokenId { id: u32, size: usize },

    #[error("sentence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed corpus {path} line {line}: {reason}")]
    Corpus {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] amnesic::Error),
}

impl EncoderError {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            EncoderError::BadGrammar(_) => "BadGrammar",
            EncoderError::IndexOutOfRange { .. } => "IndexOutOfRange",
            EncoderError::UnknownToken(_) | EncoderError::UnknownTokenId { .. } => "UnknownToken",
            EncoderError::TooLong { .. } => "TooLong",
            EncoderError::Config(_) => "ConfigError",
            EncoderError::Corpus { .. } => "FormatError",
            EncoderError::Checkpoint { .. } => "FormatError",
            EncoderError::Core(e) => e.kind(),
        }
    }

    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            EncoderError::Corpus { path, .. } | EncoderError::Checkpoint { path, .. } => Some(path),
            EncoderError::Core(e) => e.path(),
            _ => None,
        }
    }
}

pub(crate) fn io_error(path: impl Into<PathBuf>, source: std::io::Error) -> EncoderError {
    EncoderError::Core(amnesic::Error::Io {
        path: path.into(),
        source,
    })
}
