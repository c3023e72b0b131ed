use thiserror::Error;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error(transparent)]
    Occ(#[from] occdrive_core::OccError),
    #[error(transparent)]
    Render(#[from] occdrive_render::RenderError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] occdrive_nn::CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, VideoError>;
