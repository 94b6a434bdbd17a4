use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("stage cache error: {0}")]
    Cache(String),

    #[error("stage index {stage} outside 1..={stages}")]
    StageIndex { stage: usize, stages: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at stage {stage}")]
    NonFiniteLoss { stage: usize },

    #[error("unknown latency signature: {0}")]
    MissingSignature(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category used by the CLI to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or usage (exit code 2).
    Config,
    /// Missing or malformed data artifacts (exit code 3).
    Data,
    /// Internal invariant violation (exit code 4).
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Arch(_) => ErrorKind::Config,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::MissingSignature(_) => {
                ErrorKind::Data
            }
            _ => ErrorKind::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
