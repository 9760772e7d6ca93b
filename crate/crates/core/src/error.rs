use thiserror::Error;

/// Errors produced by the simulation and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} did not converge after {iterations} iterations (last change {last_change:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        last_change: f64,
    },

    #[error("cannot resolve {requested} emitters from {samples} usable spectral samples (at most {max} resolvable)")]
    TooManyEmitters {
        requested: usize,
        max: usize,
        samples: usize,
    },

    #[error("no consistent lattice constant in [{lo}, {hi}] px (best coherence {coherence:.3})")]
    NoLatticeConstant { lo: f64, hi: f64, coherence: f64 },

    #[error("column {column} is not covered by any atlas patch")]
    OutsideAtlas { column: usize },

    #[error("atlas patch {index} has no usable profiles")]
    EmptyPatch { index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("calibration missing: {0}")]
    CalibrationMissing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
