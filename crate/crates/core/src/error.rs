// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),

    #[error("png decode error in {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("sample {sample_id}: {message}")]
    Sample { sample_id: String, message: String },

    #[error("duplicate sample id: {0}")]
    DuplicateSample(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Architecture(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
