use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed but a field is missing, malformed or out of range.
    #[error("{file}: field `{field}`: {message}")]
    Format {
        file: String,
        field: String,
        message: String,
    },

    /// Body model violates a structural invariant (tree shape, weights).
    #[error("invalid body model: {0}")]
    Structure(String),

    /// Caller passed an argument that violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An invariant that should be guaranteed upstream did not hold.
    #[error("internal consistency: {0}")]
    Internal(String),

    /// Loss or output became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(file: impl Into<String>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn param(message: impl Into<String>) -> Self {
        Error::Param(message.into())
    }
}
