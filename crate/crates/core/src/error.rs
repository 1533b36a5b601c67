use std::path::PathBuf;

/// Errors produced by the library.
///
/// The variants map onto the CLI exit codes: input and parse problems exit
/// with 1, numeric failures with 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// A model, camera, or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file did not match its declared format.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    /// NaN/Inf showed up where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The gradient-check harness could not produce a trustworthy result.
    #[error("gradient check harness: {0}")]
    Harness(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Harness(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
