use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("SVD did not converge after {sweeps} sweeps (tolerance {tol:e})")]
    NoConvergence { sweeps: usize, tol: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("operation out of order: {0}")]
    Order(String),

    #[error("missing input node `{0}`")]
    MissingInput(String),

    #[error("no prototype or samples for class {0}")]
    MissingClass(usize),

    #[error("zero-norm embedding for class {0}")]
    DegenerateEmbedding(usize),

    #[error("geometric dimension {dim} must exceed class count {classes}")]
    DimensionTooSmall { classes: usize, dim: usize },

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("schema error in {source_name}: {message}")]
    Schema { source_name: String, message: String },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("attribute `{0}` has no supporting base samples")]
    EmptyAttribute(String),

    #[error("missing semantic embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("every attribute is masked for class {0}")]
    AllMasked(usize),

    #[error("class {class} has {available} samples, need {required}")]
    InsufficientSamples {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid statistics: {0}")]
    InvalidStats(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("metric `{0}` is undefined (empty subset)")]
    UndefinedMetric(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable kind, used for structured error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::Shape { .. } => "ShapeError",
            Error::Order(_) => "OrderError",
            Error::MissingInput(_) => "MissingInput",
            Error::MissingClass(_) => "MissingClass",
            Error::DegenerateEmbedding(_) => "DegenerateEmbedding",
            Error::DimensionTooSmall { .. } => "DimensionTooSmall",
            Error::Parse { .. } => "ParseError",
            Error::Schema { .. } => "SchemaError",
            Error::UnknownClass(_) => "UnknownClass",
            Error::EmptyAttribute(_) => "EmptyAttribute",
            Error::MissingEmbedding(_) => "MissingEmbedding",
            Error::AllMasked(_) => "AllMasked",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::InvalidStats(_) => "InvalidStats",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::ProtocolViolation(_) => "ProtocolViolation",
            Error::UndefinedMetric(_) => "UndefinedMetric",
            Error::Io { .. } => "IoError",
        }
    }
}
