use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("assignment needs rows <= cols, got {rows}x{cols}")]
    TooManyRows { rows: usize, cols: usize },

    #[error("graph output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("weights are not row-stochastic (row {row} sums to {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    CheckpointShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint corrupted: {0}")]
    CheckpointCorrupt(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
