//! Error types shared across the crate.

use thiserror::Error;

/// Coarse error classes, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid configuration (bad mode string, inconsistent shapes in a config, ...).
    Config,
    /// Bad or missing data (manifest errors, shape mismatches, non-finite inputs).
    Data,
    /// Numeric failure at runtime (divergence, NaN parameters).
    Numeric,
}

#[derive(Debug, Error)]
pub enum CamfError {
    #[error("config error: {0}")]
    Config(String),

    #[error("unknown fusion mode `{0}`")]
    UnknownFusionMode(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("subject `{subject_id}`: expected {expected}, got {got}")]
    ShapeMismatch {
        subject_id: String,
        expected: String,
        got: String,
    },

    #[error("subject `{subject_id}`: missing file {path}")]
    MissingFile { subject_id: String, path: String },

    #[error("subject `{subject_id}`: non-finite values in {what}")]
    NonFinite { subject_id: String, what: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CamfError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CamfError::Config(_) | CamfError::UnknownFusionMode(_) => ErrorKind::Config,
            CamfError::Data(_)
            | CamfError::ShapeMismatch { .. }
            | CamfError::MissingFile { .. }
            | CamfError::NonFinite { .. }
            | CamfError::EmptyBatch
            | CamfError::Io(_)
            | CamfError::Json(_) => ErrorKind::Data,
            CamfError::Numeric(_) => ErrorKind::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, CamfError>;
