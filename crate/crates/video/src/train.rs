//! Flow-matching training of the toy video model.

use std::path::Path;

use candle_core::{DType, Tensor};
use occdrive_nn::{load_checkpoint, save_checkpoint, AdamConfig, Optimizer, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::error::{Result, VideoError};
use crate::flow::video_loss;
use crate::model::{ToyVideoModel, VideoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamConfig,
    /// Flow draws per clip for the before/after evaluation loss.
    pub eval_draws: usize,
    pub log_every: usize,
}

impl Default for VideoTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            optim: AdamConfig {
                lr: 1e-3,
                min_lr: 1e-4,
                weight_decay: 0.0,
                warmup_steps: 20,
                ..Default::default()
            },
            eval_draws: 4,
            log_every: 25,
        }
    }
}

impl VideoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.eval_draws == 0 {
            return Err(VideoError::Config("steps, batch and eval_draws must be positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(VideoError::Config(format!("learning rate {} must be positive", self.optim.lr)));
        }
        Ok(())
    }
}

pub struct VideoRun {
    pub store: ParamStore,
    pub model: ToyVideoModel,
    pub losses: Vec<f64>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

fn batch(data: &[VideoSample], idx: &[usize], cfg: &VideoConfig, dtype: DType) -> Result<(Tensor, Tensor)> {
    let videos = idx.iter().map(|&i| data[i].video.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?;
    let conds = idx.iter().map(|&i| data[i].condition(cfg, dtype)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&videos, 0)?, Tensor::stack(&conds, 0)?))
}

/// Flow loss averaged over every clip and `draws` fixed-seed flow draws.
pub fn eval_loss(model: &ToyVideoModel, data: &[VideoSample], draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, c) = batch(data, &[i], &model.cfg, model.dtype())?;
        for _ in 0..draws {
            total += video_loss(model, &x, &c, &mut rng)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total / (data.len() * draws) as f64)
}

pub fn train_toy_video(data: &[VideoSample], cfg: &VideoConfig, tcfg: &VideoTrainConfig, seed: u64) -> Result<VideoRun> {
    cfg.validate()?;
    tcfg.validate()?;
    if data.is_empty() {
        return Err(VideoError::Config("empty video dataset".into()));
    }
    let want = cfg.video_shape();
    if let Some(bad) = data.iter().find(|s| s.video.dims() != want) {
        return Err(VideoError::Shape(format!("clip {:?}, model wants {want:?}", bad.video.dims())));
    }
    let mut store = ParamStore::new(seed, DType::F32);
    let model = ToyVideoModel::new(&mut store, cfg)?;
    let eval_seed = seed ^ 0xe7a1;
    let initial_eval = eval_loss(&model, data, tcfg.eval_draws, eval_seed)?;
    let mut opt = Optimizer::new(store.vars(), tcfg.optim, tcfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let idx: Vec<usize> = (0..tcfg.batch.min(data.len())).map(|_| rng.gen_range(0..data.len())).collect();
        let (x, c) = batch(data, &idx, cfg, DType::F32)?;
        let loss = video_loss(&model, &x, &c, &mut rng).map_err(|e| match e {
            VideoError::NonFinite { what, .. } => VideoError::NonFinite { what, step },
            e => e,
        })?;
        let value = loss.to_scalar::<f32>()? as f64;
        opt.backward_step(&loss)?;
        if tcfg.log_every > 0 && step % tcfg.log_every == 0 {
            log::info!("video step {step}: loss {value:.4} lr {:.2e}", opt.current_lr());
        }
        losses.push(value);
    }
    let final_eval = eval_loss(&model, data, tcfg.eval_draws, eval_seed)?;
    Ok(VideoRun {
        store,
        model,
        losses,
        initial_eval,
        final_eval,
    })
}

pub fn save_video_model(store: &ParamStore, cfg: &VideoConfig, dir: &Path) -> Result<()> {
    let meta = serde_json::json!({ "kind": "toy_video", "config": cfg });
    save_checkpoint(store, &meta, dir)?;
    Ok(())
}

pub fn load_video_model(dir: &Path) -> Result<(ParamStore, ToyVideoModel)> {
    let ck = load_checkpoint(dir)?;
    if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("toy_video") {
        return Err(VideoError::Config(format!("{} is not a toy video checkpoint", dir.display())));
    }
    let cfg: VideoConfig = serde_json::from_value(ck.meta["config"].clone())?;
    let mut store = ParamStore::new(0, DType::F32);
    let model = ToyVideoModel::new(&mut store, &cfg)?;
    ck.load_into(&store)?;
    Ok((store, model))
}
