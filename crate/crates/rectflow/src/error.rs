//! Crate-wide error type.
//!
//! Numeric failures carry enough context to act on: shape errors report both
//! shapes, conditioning failures report the offending pivot, parse errors
//! report the row/column where the bad cell was found.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced at layer {layer} during {context}")]
    NonFinite { context: &'static str, layer: usize },

    #[error("{context}: matrix is not positive definite (smallest pivot {pivot:.3e})")]
    NotPositiveDefinite { context: &'static str, pivot: f64 },

    #[error("conjugate gradient produced a non-finite iterate at iteration {iteration}")]
    CgNumeric { iteration: usize },

    #[error("operator is not positive definite: q'Aq = {curvature:.3e} at iteration {iteration}")]
    CgIndefinite { curvature: f64, iteration: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: found {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted { epoch: usize, reason: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
