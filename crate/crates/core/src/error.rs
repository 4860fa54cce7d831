use std::io;

use thiserror::Error;

use crate::data::SampleId;

pub type Result<T, E = UnlearnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeError { expected: usize, found: usize },

    #[error("sample {0} is not present")]
    MissingSample(SampleId),

    #[error("training diverged at step {step} (loss = {loss})")]
    NumericalDivergence { step: usize, loss: f64 },

    #[error("curvature matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    SingularCurvature { min_eigenvalue: f64 },

    #[error("no usable curvature pairs in history")]
    EmptyHistory,

    #[error("history does not match request: {0}")]
    HistoryMismatch(String),

    #[error("series of length {len} is too short (need at least {min})")]
    InsufficientSeries { len: usize, min: usize },

    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),

    #[error("no retraining baseline available")]
    NoBaseline,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl UnlearnError {
    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        UnlearnError::DegenerateInput(msg.into())
    }

    pub(crate) fn shape(expected: usize, found: usize) -> Self {
        UnlearnError::ShapeError { expected, found }
    }
}
