//! Files, experiment protocols and reports around `cfa-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod expand;
pub mod experiments;
pub mod report;

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Core(#[from] cfa_core::Error),
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for invalid input, 3 for a diverged run.
    pub fn exit_code(&self) -> i32 {
        use cfa_core::Error as E;
        match self {
            LabError::Config { .. } | LabError::Parse { .. } | LabError::Checkpoint { .. } => 2,
            LabError::Core(E::Diverged { .. }) => 3,
            LabError::Core(
                E::Config(_) | E::Param { .. } | E::Vocabulary { .. } | E::Shape { .. } | E::Empty(_) | E::Contract(_),
            ) => 2,
            LabError::Core(_) | LabError::Io { .. } => 1,
        }
    }
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), LabError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| LabError::io(path, e))
}
