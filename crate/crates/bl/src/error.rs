//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty basis: degree 0 with the constant monomial excluded")]
    EmptyBasis,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("operation requires {required} output mode, model is in {actual} mode")]
    Mode {
        required: &'static str,
        actual: &'static str,
    },

    #[error("partition quadrature supports at most 2 response dimensions, got {0}")]
    UnsupportedDimension(usize),

    #[error("Langevin chain {chain} diverged at step {step}")]
    Divergence { chain: usize, step: usize },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: String,
        message: String,
    },

    #[error("training aborted: non-finite loss at batch {batch} of epoch {epoch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("unknown model file format version {0}")]
    FormatVersion(u32),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BlError>;
