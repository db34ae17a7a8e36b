use std::path::PathBuf;

use thiserror::Error;

/// Grid axis named in out-of-domain errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Lat,
    Lon,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Time => "time",
            Axis::Lat => "lat",
            Axis::Lon => "lon",
        })
    }
}

/// Coarse classification used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("numerical error at epoch {epoch}: {message}")]
    NonFiniteLoss { epoch: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("query outside grid on {axis} axis: {value} not in [{min}, {max}]")]
    OutOfDomain {
        axis: Axis,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Argument(_) => ErrorKind::Config,
            Error::Numerical(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numerical,
            Error::Data(_)
            | Error::OutOfDomain { .. }
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Csv { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
