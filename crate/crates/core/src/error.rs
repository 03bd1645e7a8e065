use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid field `{field}`: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("{path}: unsupported datatype {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("axis {} ({axis}) of extent {extent} is not divisible by the cumulative stride {multiple}", ["x", "y", "z"].get(*axis).unwrap_or(&"?"))]
    Indivisible {
        axis: usize,
        extent: usize,
        multiple: usize,
    },

    #[error("label {value} at voxel {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        value: i64,
        num_classes: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter `{0}` is not attached to the graph")]
    DetachedParameter(String),

    #[error("gradient/parameter name mismatch: {0}")]
    NameMismatch(String),

    #[error("non-finite value in `{name}` at step {step}")]
    NonFinite { name: String, step: u64 },

    #[error("missing counterpart for case `{0}`")]
    MissingCase(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
