use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is out of its legal range.
    #[error("configuration error: {0}")]
    Config(String),

    /// The data cannot satisfy the requested episode or bank shape.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A forward operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training loss became non-finite.
    #[error("numerical divergence at training step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// The API was called in a way that has no meaning (non-scalar loss, empty episode set).
    #[error("usage error: {0}")]
    Usage(String),

    /// Cosine similarity requested for a zero-norm vector.
    #[error("cosine similarity undefined for zero-norm input")]
    UndefinedSimilarity,

    /// The store violates a manifest or record invariant.
    #[error("validation error in field `{field}`: {detail}")]
    Validation { field: String, detail: String },

    /// Wrong magic bytes, unsupported version or malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// Payload ended before the declared sections were read.
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Dimension { .. } | Error::Parse { .. } => 2,
            Error::Capacity(_)
            | Error::Validation { .. }
            | Error::Format(_)
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Io { .. }
            | Error::UndefinedSimilarity => 3,
            Error::NonFinite { .. } | Error::Divergence { .. } => 4,
        }
    }
}
