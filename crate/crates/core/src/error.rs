use thiserror::Error;

/// Errors raised by the simulation and planning layers.
///
/// Divergent paths are never errors; they are reported as data in
/// [`crate::schemes::PathOutcome`] and [`crate::mlmc::LevelEstimate`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("grid mismatch: {n_steps} steps of size {step} do not cover horizon {horizon}")]
    GridMismatch { n_steps: usize, step: f64, horizon: f64 },

    #[error("level {0} has no coarse partner")]
    NoCoarseLevel(usize),

    #[error("level {level} exceeds the grid's maximum level {max_level}")]
    LevelOutOfRange { level: usize, max_level: usize },

    #[error("h({step}) = {height} lies below omega(0) = {omega_zero}; (omega, h) pairing is invalid")]
    InvalidTruncation {
        step: f64,
        height: f64,
        omega_zero: f64,
    },

    #[error("no exact or reference solution available for problem `{0}`")]
    MissingOracle(String),

    #[error("planning failed: {0}")]
    Planning(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
