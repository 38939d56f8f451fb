use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid token id {id} (vocabulary size {vocab_size})")]
    InvalidTokenId { id: usize, vocab_size: usize },

    #[error("zero vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("batch too small for in-batch negatives (need at least 2, got {0})")]
    BatchTooSmall(usize),

    #[error("triplet has no negatives")]
    NoNegatives,

    #[error("cannot sample out-of-group negative")]
    NoOutOfGroupNegative,

    #[error("gradient overflow")]
    GradientOverflow,

    #[error("undefined AP: ranking contains no positives")]
    UndefinedAp,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("regime {regime} expects {expected} training data")]
    RegimeDataMismatch {
        regime: &'static str,
        expected: &'static str,
    },

    #[error("checkpoint format error: {0} (expected format version {version})", version = crate::encoder::CHECKPOINT_VERSION)]
    CheckpointFormat(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("grid point {point}: {source}")]
    GridPoint {
        point: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
