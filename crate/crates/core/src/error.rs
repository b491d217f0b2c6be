use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the grading toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },

    #[error("grade {0} is outside 0..=4")]
    InvalidGrade(i64),

    #[error("image error: {0}")]
    Image(String),

    #[error("failed to load image {path}: {reason}")]
    ImageLoad { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("insufficient entries for grade {label}: need {needed}, have {available} (short by {shortfall})")]
    InsufficientEntries {
        label: u8,
        needed: usize,
        available: usize,
        shortfall: usize,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("prediction failed for {sample}: {source}")]
    Sample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Checkpoint decode failures, kept separate so callers can report them precisely.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u16, supported: u16 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name}: stored shape {stored:?} does not match config shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
