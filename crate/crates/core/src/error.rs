use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("could not place {requested} buildings after {attempts} attempts (placed {placed})")]
    PlacementFailed {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("mask keeps no cells")]
    EmptyMask,

    #[error("observation set is empty")]
    EmptyObservations,

    #[error("region is empty")]
    EmptyRegion,

    #[error("unsupported schedule kind for {0}")]
    UnsupportedSchedule(&'static str),

    #[error("step {t} out of range 0..={n}")]
    StepOutOfRange { t: usize, n: usize },

    #[error("truth map is all zero")]
    ZeroTruth,

    #[error("grid {width}x{height} smaller than the {window}x{window} window")]
    GridTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("sampler failed at step {step}: {source}")]
    SamplerStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
