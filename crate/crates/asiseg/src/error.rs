use std::path::{Path, PathBuf};

/// Errors of the IO/CLI layer; core errors pass through unchanged.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] asiseg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl std::fmt::Display) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        use asiseg_core::Error as E;
        match self {
            AppError::Core(e) => match e {
                E::Shape(_) => "shape",
                E::InputTooShort { .. } => "input_too_short",
                E::SampleRate(_) => "sample_rate",
                E::EmptyDataset => "empty_dataset",
                E::DegenerateRange(_) => "degenerate_range",
                E::Config(_) => "config",
                E::Argument(_) => "argument",
                E::Schema(_) => "schema",
                E::Validation(_) => "validation",
                E::NonFinite(_) => "non_finite",
            },
            AppError::Io { .. } => "io",
            AppError::Format { .. } => "format",
            AppError::Manifest(_) => "manifest",
            AppError::Checkpoint(_) => "checkpoint",
            AppError::Training(_) => "training",
        }
    }
}
