use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the sampling engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// Target point lies outside the region reachable by a shifted concave curve.
    #[error("timestep {t0} at step {i0} is outside the reachable band [{lower}, {upper}]")]
    OutOfRange {
        i0: f64,
        t0: f64,
        lower: f64,
        upper: f64,
    },

    /// The linear family has no shifted solution off its own diagonal.
    #[error("linear schedule has no shifted solution through (i={i0}, t={t0}); use the chord advance")]
    Degenerate { i0: f64, t0: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial loss {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
