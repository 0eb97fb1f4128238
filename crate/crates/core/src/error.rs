use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    #[error("no statistics section")]
    NoStatisticsSection,

    #[error("empty execution")]
    EmptyExecution,

    #[error("diverged: non-finite training loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("kernel not positive definite")]
    NotPositiveDefinite,

    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("window: {0}")]
    Window(String),

    #[error("unknown group {0}")]
    UnknownGroup(String),

    #[error("all objective evaluations failed")]
    AllEvaluationsFailed,

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },

    #[error("template is missing placeholder {0}")]
    MissingPlaceholder(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
