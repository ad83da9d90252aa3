use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{block}: expected {expected} input channels, got {actual}")]
    ChannelMismatch {
        block: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid distillation config: {0}")]
    DistillConfig(String),

    #[error("invalid training config: {0}")]
    TrainConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}: row {row}: {reason}")]
    CsvRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("{path}: {reason}")]
    Layout { path: PathBuf, reason: String },

    #[error("{path}: cannot decode image: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("class {class} has no samples in split {split}; weight is undefined")]
    EmptyClass { class: String, split: String },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: corrupt header: {0}")]
    CorruptHeader(String),

    #[error("checkpoint: truncated payload in section {0}")]
    TruncatedPayload(String),

    #[error("checkpoint: tensor {name} has dims {found:?}, model expects {expected:?}")]
    DimensionMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{0}")]
    Metrics(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than input data or usage.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
