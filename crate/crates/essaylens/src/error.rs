use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] essaylens_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("line {line}: embedding dimension {got} differs from {expected} earlier in the file")]
    DimInconsistent { line: usize, expected: usize, got: usize },
    #[error("corrupt model container: {0}")]
    CorruptContainer(String),
    #[error("model container version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("no model with id `{0}`")]
    ModelNotFound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}
