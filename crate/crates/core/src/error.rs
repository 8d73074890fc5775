use thiserror::Error;

use crate::schedule::StrategyKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("non-finite loss {loss} at step {step} (strategy drawn: {strategy:?})")]
    NonFiniteLoss {
        step: u64,
        strategy: StrategyKind,
        loss: f64,
    },

    #[error("non-finite sampler state at reverse step {step}")]
    NonFiniteState { step: usize },

    #[error("sampler diverged at reverse step {step}: state norm {norm:e}")]
    Diverged { step: usize, norm: f64 },

    #[error("no generated entries to score")]
    EmptyRegion,

    #[error("covariance not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {found:08x}")]
    Checksum { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, found: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
