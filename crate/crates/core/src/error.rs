use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("inconsistent dataset: {0}")]
    Consistency(String),

    #[error("empty input")]
    EmptyInput,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("cannot split {sentences} sentence(s) into non-empty train and dev sets")]
    TooFewSentences { sentences: usize },

    #[error("sample size {k} exceeds dataset size {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("property '{property}' has fewer than two distinct labels")]
    DegenerateLabels { property: String },

    #[error("unknown property '{0}'")]
    UnknownProperty(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("removing more directions would exhaust the {dim}-dimensional space")]
    RankExhausted { dim: usize },

    #[error("label '{0}' does not occur in the training data")]
    LabelAbsent(String),

    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Format { .. } => "FormatError",
            Error::Consistency(_) => "ConsistencyError",
            Error::EmptyInput => "EmptyInput",
            Error::EmptyDataset => "EmptyDataset",
            Error::TooFewSentences { .. } => "TooFewSentences",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::DegenerateLabels { .. } => "DegenerateLabels",
            Error::UnknownProperty(_) => "UnknownProperty",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::RankExhausted { .. } => "RankExhausted",
            Error::LabelAbsent(_) => "LabelAbsent",
            Error::TooFewPoints(_) => "TooFewPoints",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Json { .. } => "JsonError",
        }
    }

    /// The file this error refers to, when there is one.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } | Error::Format { path, .. } | Error::Json { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }
}
