use std::path::PathBuf;

use evalp_core::data::IdxError;

/// Process exit codes.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Idx { path: PathBuf, source: IdxError },
    #[error(transparent)]
    Core(#[from] evalp_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Core(evalp_core::Error::InvalidConfig(_)) => EXIT_CONFIG,
            Self::Core(evalp_core::Error::Diverged { .. }) => EXIT_DIVERGED,
            Self::Checkpoint { .. } | Self::Incompatible(_) => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
