use std::path::PathBuf;

use thiserror::Error;

/// Mismatched or invalid array dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// A configuration value violates its documented invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: `{parameter}` {reason}")]
pub struct ConfigError {
    pub parameter: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub fn new(parameter: &'static str, reason: impl Into<String>) -> Self {
        Self {
            parameter,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// The root node could not place a single branch inside the circle.
    #[error("generation failed: root exhausted its retry budget; check `{parameter}` ({detail})")]
    Degenerate { parameter: &'static str, detail: String },
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("batch norm layer {layer} has no running statistics yet (inference before any training update)")]
    UninitializedStatistics { layer: usize },
    #[error("labels must be binary, found {value} at index {index}")]
    NonBinaryLabel { index: usize, value: f64 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("non-finite loss at iteration {iteration}; activation norms: {norms}")]
    NonFinite { iteration: u64, norms: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("sample source: {0}")]
    Source(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("field of view is empty")]
    EmptyFov,
    #[error("ROC needs both classes inside the field of view ({positives} positive, {negatives} negative pixels)")]
    SingleClass { positives: usize, negatives: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("case {case}: missing files {paths:?}")]
    MissingFiles { case: String, paths: Vec<PathBuf> },
    #[error("expected 3 color channels, got {0}")]
    Channels(usize),
    #[error("case {case}: {detail}")]
    Inconsistent { case: String, detail: String },
    #[error("config {path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
