use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline, from tensor kernels up to the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid prior: mask selects no entries")]
    InvalidPrior,

    #[error("empty set passed to {0}")]
    EmptySet(&'static str),

    #[error("inconsistent label: target {target} of row {row} is masked out")]
    InconsistentLabel { row: usize, target: usize },

    #[error("training diverged: non-finite gradient for parameter `{param}`")]
    Divergence { param: String },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("dataset integrity: sample `{sample}` labels part {part} outside its prior")]
    DatasetIntegrity { sample: String, part: usize },

    #[error("unknown object class {0}")]
    UnknownObject(String),

    #[error("hypothesis has no parts")]
    EmptyHypothesis,

    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input contract violated: {0}")]
    InputContract(String),

    #[error("generator error: {0}")]
    Generator(String),

    #[error("manifest validation failed: {0}")]
    ManifestValidation(String),

    #[error("no records for class {0}")]
    MissingClass(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("checkpoint incompatible with dataset: {0}")]
    Compatibility(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
