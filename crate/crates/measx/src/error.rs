use std::io;
use std::path::{Path, PathBuf};

use measx_core::netcore::NetError;
use measx_core::CorpusError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn corpus(path: &Path, source: CorpusError) -> Self {
        Error::Corpus { path: path.to_path_buf(), source }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Corpus { .. } | Error::Data(_) => 3,
            Error::Diverged(_) => 4,
            Error::MissingCheckpoint(_) | Error::Checkpoint { .. } => 5,
        }
    }
}

/// Route a model-side error: divergence gets its own code, the rest is bad input.
pub(crate) fn from_net(e: NetError) -> Error {
    match e {
        NetError::TrainingDiverged(m) => Error::Diverged(m),
        other => Error::Data(other.to_string()),
    }
}
