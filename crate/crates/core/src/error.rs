use std::path::PathBuf;

use thiserror::Error;
use tsrl_autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("tiling error: length {length} is not divisible by patch length {patch_len}")]
    Tiling { length: usize, patch_len: usize },

    #[error("training failed at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 data, 3 training or numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json { .. } | Error::Tiling { .. } => 1,
            Error::Data(_) | Error::Parse { .. } | Error::Split(_) | Error::Io { .. } => 2,
            Error::Tensor(_)
            | Error::Training { .. }
            | Error::Metric(_)
            | Error::Contract(_) => 3,
        }
    }
}
