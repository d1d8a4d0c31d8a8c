use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}` (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("loss node {node} is not a scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("too many malformed rows: {bad} of {total} failed to parse (first: line {first_line}: {first_message})")]
    TooManyBadRows {
        bad: usize,
        total: usize,
        first_line: usize,
        first_message: String,
    },

    #[error("dataset is empty after {0}")]
    EmptyDataset(&'static str),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("length mismatch: {what} (expected {expected}, got {got})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing metric `{0}`")]
    MissingMetric(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NonScalarLoss { .. } | Error::Tensor(_) => "tensor",
            Error::TooManyBadRows { .. } | Error::Malformed(_) => "malformed_input",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Config(_) => "config",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::Diverged { .. } | Error::NonFinite(_) => "diverged",
            Error::MissingMetric(_) => "missing_metric",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) | Error::TomlDe(_) | Error::TomlSer(_) => "format",
        }
    }
}
