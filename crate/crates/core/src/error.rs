use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed action: expected {expected} entries, got {actual}")]
    MalformedAction { expected: usize, actual: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty environment: device count must be positive")]
    EmptyEnvironment,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode exhausted: round {round} reached horizon {horizon}")]
    EpisodeExhausted { round: usize, horizon: usize },

    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss mask selects no outputs")]
    EmptyMask,

    #[error("no client updates to aggregate")]
    NoUpdates,

    #[error("replay buffer holds {available} transitions, batch needs {requested}")]
    Underfilled { available: usize, requested: usize },

    #[error("transition log is empty")]
    EmptyLog,

    #[error("{path}: line {line}: {reason}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unsupported model format version {0}")]
    FormatVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
