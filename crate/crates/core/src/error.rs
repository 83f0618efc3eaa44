use std::path::PathBuf;

use thiserror::Error;

use crate::diagnostics::MeanFieldResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid configuration: `{field}` {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("trajectory diverged at step {step} (|h| > {guard:e})")]
    Divergence { step: usize, guard: f64 },

    #[error("eigenvalue decomposition did not converge")]
    EigenFailure,

    #[error("missing data: {0}")]
    MissingData(&'static str),

    #[error("fixed-point iteration did not converge after {} iterations", best.iterations)]
    NonConvergence { best: MeanFieldResult },

    #[error("bisection for the critical variance did not converge")]
    BisectionFailure,

    #[error("spectral kernel pole at omega = {omega} (denominator {denominator:e})")]
    Pole { omega: f64, denominator: f64 },

    #[error("insufficient data: {samples} samples for segments of length {segment}")]
    InsufficientData { samples: usize, segment: usize },

    #[error("frequency band [{band_min}, {band_max}] holds {points} usable grid points, need at least 3")]
    EmptyBand {
        band_min: f64,
        band_max: f64,
        points: usize,
    },

    #[error("theoretical spectrum vanishes at omega = {omega}")]
    ZeroTheory { omega: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    /// True for errors that come from the experiment description rather than
    /// from numerics or the filesystem.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Validation { .. } | Error::InvalidParameter(_)
        )
    }
}
