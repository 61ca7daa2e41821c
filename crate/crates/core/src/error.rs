//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RectError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer} is not editable (kind {kind}); only conv2d/dense layers hold key-value weights")]
    NotEditable { layer: usize, kind: String },

    #[error("layer index {layer} out of range (model has {count} layers)")]
    LayerOutOfRange { layer: usize, count: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar head, got shape {0:?}")]
    NonScalarHead(Vec<usize>),

    #[error("value {0} was not recorded on this tape")]
    UntapedValue(usize),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("rank-one edit failed: value loss did not decrease after {epochs} steps (before {before:.6e}, after {after:.6e})")]
    EditFailed {
        epochs: usize,
        before: f64,
        after: f64,
    },

    #[error("training diverged at epoch {epoch}: loss became non-finite (last finite loss {last_loss:.6})")]
    TrainDiverged { epoch: usize, last_loss: f64 },

    #[error("checkpoint error in field `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RectError>;
