use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("unsupported protocol: {0}")]
    UnsupportedProtocol(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path:?}: {msg}")]
    Format { path: Option<PathBuf>, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format { path: None, msg: msg.into() }
    }

    pub(crate) fn at(self, path: &std::path::Path) -> Self {
        match self {
            Error::Format { msg, .. } => Error::Format { path: Some(path.to_path_buf()), msg },
            Error::Io(source) => Error::File { path: path.to_path_buf(), source },
            other => other,
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 4,
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::from(e).at(path))
}

pub(crate) fn read_text(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))
}
