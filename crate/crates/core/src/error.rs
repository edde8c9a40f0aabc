use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// An API was used outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("config field `{path}`: {reason}")]
    ConfigValidation { path: String, reason: String },

    #[error("record {id} rejected: {reason}")]
    BadRecord { id: String, reason: String },

    #[error("dataset too small: have {have} examples, need at least {need}")]
    DatasetTooSmall { have: usize, need: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category string.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Contract(_) => "contract",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::Divergence { .. } => "divergence",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::BadCheckpoint { .. } => "bad_checkpoint",
            Error::ConfigValidation { .. } => "config_validation",
            Error::BadRecord { .. } => "bad_record",
            Error::DatasetTooSmall { .. } => "dataset_too_small",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code for the CLI: missing checkpoints, config errors and
    /// divergence get dedicated codes; everything else is a generic failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingCheckpoint(_) => 2,
            Error::ConfigValidation { .. } => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
