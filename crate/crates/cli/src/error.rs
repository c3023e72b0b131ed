use thiserror::Error;

/// Config problems exit with 2, everything else with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    occdrive_core::OccError,
    occdrive_world::WorldError,
    occdrive_render::RenderError,
    occdrive_video::VideoError,
    occdrive_nn::CheckpointError,
    candle_core::Error,
    std::io::Error,
    serde_json::Error
);

pub type Result<T> = std::result::Result<T, CliError>;
