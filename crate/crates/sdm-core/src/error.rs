//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by data loading, model evaluation and fitting.
#[derive(Debug, Error)]
pub enum SdmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("non-finite value in row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },

    #[error("duplicate cell id {id} in row {row}")]
    DuplicateId { row: usize, id: u64 },

    #[error("non-positive quadrature weight {value} in row {row}")]
    BadWeight { row: usize, value: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("intensity overflow at cell {cell} (linear predictor {eta})")]
    Overflow { cell: u64, eta: f64 },

    #[error("deformed model positivity violated at cells {cells:?}")]
    PositivityViolation { cells: Vec<u64> },

    #[error("singular matrix in {context}; consider a ridge penalty")]
    Singular { context: String },

    #[error("fit did not converge after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence { iterations: usize, score_norm: f64 },

    #[error("{0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, SdmError>;
