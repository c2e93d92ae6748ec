use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the IDS pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid quantiser: {0}")]
    InvalidQuantSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergenceDetected { epoch: usize },

    #[error("model is not calibrated: activation scale missing for layer {layer}")]
    NotCalibrated { layer: usize },

    #[error("threshold search hit a non-monotone code function in layer {layer}, neuron {neuron}")]
    NonMonotone { layer: usize, neuron: usize },

    #[error("attack interval [{start}, {stop}) is outside the stream duration {duration}")]
    WindowOutOfRange {
        start: f64,
        stop: f64,
        duration: f64,
    },

    #[error("length mismatch: {predictions} predictions vs {truths} ground-truth labels")]
    LengthMismatch { predictions: usize, truths: usize },

    #[error("invalid model file: {0}")]
    InvalidModel(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
