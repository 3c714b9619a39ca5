use thiserror::Error;

/// Errors raised by the numerical engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimension {0}: embeddings live on a sphere of dimension d >= 2")]
    InvalidDimension(usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector is not unit-norm (norm {norm})")]
    NotUnitNorm { norm: f64 },
    #[error("degenerate template: aggregated mean has norm {norm:e}")]
    DegenerateTemplate { norm: f64 },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("threshold {target} unreachable; achievable range is [{min}, {max}]")]
    UnreachableThreshold { target: f64, min: f64, max: f64 },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("rejection curve truncated: no probes retained at fraction {fraction}")]
    CurveTruncation { fraction: f64 },
    #[error("undefined PRR: oracle and random curves have the same area")]
    UndefinedPrr,
    #[error("curve grids differ")]
    GridMismatch,
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("missing input: {0}")]
    MissingInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
