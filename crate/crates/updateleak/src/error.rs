use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] updateleak_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{} is missing; run stage `{stage}` first", artifact.display())]
    MissingStage { stage: String, artifact: PathBuf },
    #[error("{} was produced by config {found}, current config is {expected}; rerun stage `{stage}`", artifact.display())]
    HashMismatch {
        stage: String,
        artifact: PathBuf,
        expected: String,
        found: String,
    },
    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn config(key: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 missing dependency,
    /// 4 anything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Core(updateleak_core::Error::Config(_)) => 2,
            Error::MissingStage { .. } | Error::HashMismatch { .. } => 3,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 4,
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Core(updateleak_core::Error::Usage(msg.into()))
}
