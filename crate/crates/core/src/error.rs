use std::path::PathBuf;

use gastwin_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Input extents incompatible with the model geometry.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Malformed dataset, label, mask or checkpoint contents.
    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Geometry(_) => 2,
            Error::Data(_) => 3,
            Error::Numerical(_) | Error::Tensor(TensorError::NonFinite { .. }) => 4,
            Error::Tensor(_) => 2,
            Error::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
