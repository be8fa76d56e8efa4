use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown classifier backend `{0}` (expected `tiny-fixture` or `resnet18-imagenet`)")]
    UnknownBackend(String),

    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("tap count mismatch: {left} vs {right}")]
    TapCountMismatch { left: usize, right: usize },

    #[error("class index {index} out of range for {num_classes} classes")]
    InvalidClassIndex { index: usize, num_classes: usize },

    #[error("mask of shape {height}x{width} is too small for total variation (need at least 2x2)")]
    DegenerateShape { height: usize, width: usize },

    #[error("non-finite {term} loss{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { term: &'static str, step: Option<usize> },

    #[error("background sampler `{0}` needs a source image")]
    MissingSource(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format { path: path.into(), message: message.to_string() }
    }
}
