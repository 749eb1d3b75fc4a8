//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, training, evaluation and IO.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A model spec, task spec or method violates a structural constraint.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// One or more configuration constraints failed; all violations listed.
    #[error("invalid config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    /// A numeric operation produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Calibration or threshold fitting received degenerate inputs.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Threshold was fitted on data that overlaps the evaluation split.
    #[error("split leakage: threshold fitted on {fitted_on} applied to the same split")]
    SplitLeakage { fitted_on: String },

    /// Checkpoint blob failed its integrity check.
    #[error("checksum mismatch for {path}: expected {expected}, got {got}")]
    ChecksumMismatch {
        path: String,
        expected: String,
        got: String,
    },

    /// A pipeline stage needs an artifact a previous stage did not produce.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
