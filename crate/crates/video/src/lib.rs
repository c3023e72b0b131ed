//! Toy multi-view video generation conditioned on semantic renders.
//!
//! A pixel-space patch transformer is trained with rectified flow matching;
//! after its blocks, normalized multi-view attention lets tokens on the same
//! frame and image row exchange information across views.

pub mod data;
pub mod error;
pub mod flow;
pub mod model;
pub mod mva;
pub mod train;

pub use data::{
    build_toy_dataset, colorize, overlap_mae, overlapping_views, read_video, write_video, ToyDataConfig, VideoSample,
};
pub use error::{Result, VideoError};
pub use flow::{euler, flow_interpolate, gaussian_like, sample_video, video_loss, FlowSample, VelocityModel};
pub use model::{condition_one_hot, MvaProbe, MvaSettings, ToyVideoModel, VideoConfig};
pub use mva::{mva_branch, normalized_mva, rearrange_views, unrearrange_views, NormMode, NormalizedMva, MVA_EPS};
pub use train::{eval_loss, load_video_model, save_video_model, train_toy_video, VideoRun, VideoTrainConfig};
