//! Crate-wide error type. Numeric preconditions fail loudly with enough
//! context to locate the offending op; nothing is silently clamped.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op} domain violation: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("row {row} has norm {norm:.3e}, below the {eps:.0e} normalization guard")]
    DegenerateNorm { row: usize, norm: f64, eps: f64 },

    #[error("embedding row {row} has norm {norm} but unit-norm input is required")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training aborted at step {step}: loss = {loss}; {diagnostic}")]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        diagnostic: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("empty input: {0}")]
    EmptyInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
