use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A formula was evaluated outside the set where it is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// 2τ²/(bσ²) ≥ 1: the ratio-sensitivity bound, and everything built on it, is void.
    #[error(
        "parameter regime violated: 2·tau²/(b·sigma²) = {ratio:.6} must be < 1 \
         (increase the sketch dimension b or the noise scale sigma_g)"
    )]
    Regime { ratio: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error means "the requested privacy setting cannot be met",
    /// as opposed to a malformed request.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Regime { .. } | Error::Calibration(_) | Error::Domain(_))
    }
}
