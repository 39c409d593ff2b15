use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("numeric fault at {location}: {detail}")]
    NumericFault { location: String, detail: String },

    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    #[error("parse error in {file} at byte {offset}: {detail}")]
    Parse {
        file: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    UnsupportedVersion { found: String, expected: String },

    #[error("observer has no observations")]
    EmptyObserver,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericFault {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short tag used by the command line for machine-parsable reasons.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidModel(_) => "invalid-model",
            Error::NumericFault { .. } => "numeric-fault",
            Error::UnsupportedOp(_) => "unsupported-op",
            Error::Parse { .. } => "parse-error",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::EmptyObserver => "empty-observer",
            Error::Io { .. } => "io-error",
        }
    }
}
