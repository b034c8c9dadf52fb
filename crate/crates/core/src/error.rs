use std::path::PathBuf;

use saits_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SaitsError>;

#[derive(Debug, Error)]
pub enum SaitsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("diagonal masking needs at least 2 time steps, got {0}")]
    DegenerateSequence(usize),

    #[error("input shape {got:?} does not match the model's [batch, {steps}, {features}]")]
    InputShape {
        got: Vec<usize>,
        steps: usize,
        features: usize,
    },

    #[error("no observed values to sample from")]
    NoObservations,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("series of length {len} is shorter than the window of {steps} steps")]
    SeriesTooShort { len: usize, steps: usize },

    #[error("zero-variance features in the training split: {0:?}")]
    ZeroVariance(Vec<String>),

    #[error("feature `{0}` has too few observed training values")]
    UnobservedFeature(String),

    #[error("split `{0}` has no evaluation hold-out")]
    MissingHoldout(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        /// Parameters of the best epoch seen before divergence, if any.
        last_good: Option<Box<crate::training::Checkpoint>>,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("unsupported container: {0}")]
    Container(String),

    #[error("checkpoint does not match configuration: {0}")]
    Manifest(String),

    #[error("gradient check refused: {0}")]
    GradCheckRefused(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SaitsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
