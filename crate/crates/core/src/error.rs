use std::path::PathBuf;

/// Errors raised by the calibration engine.
///
/// Every variant maps onto a stable, machine-readable category (see
/// [`Error::category`]) that the command-line front end reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed tensor container: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Shape(_) => "shape",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
