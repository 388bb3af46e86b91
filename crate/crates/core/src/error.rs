use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver failure at t={t:.4}: divergence residual {residual:.3e} exceeds {tolerance:.1e}")]
    SolverFailure { t: f64, residual: f64, tolerance: f64 },

    #[error("numerical blow-up at t={t:.4} in field `{field}`")]
    NumericalBlowup { t: f64, field: &'static str },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("query outside field domain: {0}")]
    OutOfDomain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("fingerprint undefined: {reason}")]
    FingerprintUndefined { reason: String, histogram: Vec<f64> },

    #[error("fit undefined: {0}")]
    FitUndefined(String),

    #[error("training error: {message}")]
    Training { message: String, diagnostics: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}
