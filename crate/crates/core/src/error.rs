use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the analysis engine.
///
/// Everything except [`Error::Io`] and [`Error::Internal`] is caused by bad
/// input and maps to a validation failure at the CLI boundary.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("checksum mismatch: header {expected:#010x}, payload {found:#010x}")]
    ChecksumMismatch { expected: u32, found: u32 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("missing data for case {case_id}: {what}")]
    Missing { case_id: String, what: String },

    #[error("{0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn missing(case_id: &str, what: impl Into<String>) -> Self {
        Error::Missing {
            case_id: case_id.to_owned(),
            what: what.into(),
        }
    }

    /// True when the error stems from invalid input rather than the engine.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Internal(_))
    }

    /// Short machine-readable category tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::Invariant(_) => "invariant",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::Insufficient(_) => "insufficient",
            Error::Missing { .. } => "missing",
            Error::Internal(_) => "internal",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
