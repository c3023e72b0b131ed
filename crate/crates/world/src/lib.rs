//! Occupancy world model: a tri-plane VAE compresses semantic voxel grids, a
//! control-conditioned transformer forecasts the next latent, and the trainer
//! runs VAE pretraining, frozen-VAE predictor training and joint fine-tuning.

pub mod ckpt;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod predictor;
pub mod trainer;
pub mod vae;

pub use error::{Result, WorldError};
pub use loss::{cross_entropy, kl_divergence, lovasz_grad, lovasz_softmax, recon_loss, vae_loss, VaeLoss, VaeLossParts};
pub use model::{from_tokens, rollout, to_tokens, Rollout};
pub use predictor::{
    prediction_loss, transform_params, transform_reg, HistoryBuffer, MutualControlAttention, PredictOutput,
    PredictionLoss, Predictor, PredictorConfig,
};
pub use vae::{
    compose_volume, latent_size_ratio, one_hot, triplane_scalar_count, LatentTriPlane, Sampling, TriPlane,
    TriPlaneVae, VaeConfig,
};
pub use trainer::{
    e2e_batch_loss, evaluate, recon_metrics, score_forecasts, train_e2e, train_predictor, train_vae, transform_errors,
    EvalReport, EvalSpec, HorizonMetrics, MetricsLog, Phase, Supervision, TrainConfig,
};
