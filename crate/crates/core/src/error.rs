use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition or invariant.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: row {row}: {message}")]
    MalformedRow { path: PathBuf, row: usize, message: String },

    #[error("unknown ticker `{0}`")]
    UnknownTicker(String),

    #[error("quadrature did not converge on {integral}: achieved error {achieved:.3e} (target {target:.3e})")]
    Quadrature {
        integral: String,
        achieved: f64,
        target: f64,
    },

    #[error("Bessel series did not converge (order {order}, |z| = {modulus:.4}, {terms} terms)")]
    BesselSeries { order: f64, modulus: f64, terms: usize },

    #[error("optimizer failed: {reason}")]
    Optimizer {
        reason: String,
        best_params: [f64; 5],
        best_objective: f64,
    },

    #[error("singular or degenerate system: {0}")]
    Degenerate(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::MalformedRow { .. } | Error::UnknownTicker(_)
        )
    }
}
