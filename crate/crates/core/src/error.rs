use thiserror::Error;

/// Errors surfaced by the game, solver and inference layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game definition: {0}")]
    InvalidGame(String),

    #[error("stage index {stage} outside [{lo}, {hi}]")]
    StageIndex { stage: i64, lo: i64, hi: i64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("constraint block assigned twice: {0}")]
    DuplicateConstraint(String),

    #[error(
        "solver did not converge after {iterations} iterations (residual {residual:.3e}): {reason}"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        reason: String,
    },

    #[error("sensitivity system is singular: {0}")]
    SensitivityFailure(String),

    #[error("covariance is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("inference failed: {0}")]
    InferenceFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
