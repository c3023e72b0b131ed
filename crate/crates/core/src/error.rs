use thiserror::Error;

#[derive(Debug, Error)]
pub enum OccError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("grid shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OccError>;
