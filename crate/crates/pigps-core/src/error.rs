//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors produced by controller, update, and rollout operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A vector or matrix had the wrong shape for the operation.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A covariance or Hessian block was not positive definite.
    NotPositiveDefinite { what: &'static str },
    /// A cost value was NaN or infinite.
    NonFiniteCost { sample: usize, timestep: usize },
    /// A state, action, or parameter value was NaN or infinite.
    NonFinite { what: &'static str },
    /// An operation that needs samples received an empty set.
    EmptySampleSet,
    /// An operation needs more samples than were provided.
    TooFewSamples { required: usize, actual: usize },
    /// A scalar parameter was out of its valid range.
    InvalidParameter { name: &'static str, reason: String },
    /// The LQR dual bisection could not reach the requested KL band.
    BisectionFailed {
        target: f64,
        achievable_min: f64,
        achievable_max: f64,
    },
    /// Supervised training produced a non-finite loss.
    TrainingDiverged { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                what,
                expected,
                actual,
            } => write!(f, "{what}: expected dimension {expected}, got {actual}"),
            Error::NotPositiveDefinite { what } => {
                write!(f, "{what} is not positive definite")
            }
            Error::NonFiniteCost { sample, timestep } => write!(
                f,
                "non-finite cost in sample {sample} at timestep {timestep}"
            ),
            Error::NonFinite { what } => write!(f, "{what} is not finite"),
            Error::EmptySampleSet => write!(f, "sample set is empty"),
            Error::TooFewSamples { required, actual } => {
                write!(f, "need at least {required} samples, got {actual}")
            }
            Error::InvalidParameter { name, reason } => {
                write!(f, "invalid parameter `{name}`: {reason}")
            }
            Error::BisectionFailed {
                target,
                achievable_min,
                achievable_max,
            } => write!(
                f,
                "KL bisection cannot reach target {target:.6e}; achievable range is \
                 [{achievable_min:.6e}, {achievable_max:.6e}]"
            ),
            Error::TrainingDiverged { epoch } => write!(
                f,
                "training loss became non-finite at epoch {epoch}; reduce the learning rate"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
