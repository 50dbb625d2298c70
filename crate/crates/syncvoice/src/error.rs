use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] syncvoice_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    /// The bytes are not a file of the expected kind or version.
    #[error("format error: {0}")]
    Format(String),
    /// The file has the right shape but its contents fail verification.
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> AppError {
    let path = path.into();
    move |source| AppError::Io { path, source }
}
