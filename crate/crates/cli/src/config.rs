//! TOML run configuration. Every table rejects unknown keys; omitted keys take
//! the desk-scale defaults below.

use std::path::Path;

use occdrive_core::SceneGenConfig;
use occdrive_nn::AdamConfig;
use occdrive_video::{ToyDataConfig, VideoConfig, VideoTrainConfig};
use occdrive_world::{EvalSpec, Phase, PredictorConfig, TrainConfig, VaeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub gen: SceneGenConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Frames per held-out sequence; must cover `eval.past + eval.future`.
    pub test_seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gen: SceneGenConfig::default(),
            train: 32,
            val: 8,
            test: 8,
            test_seq_len: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub past: usize,
    pub future: usize,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            past: 4,
            future: 6,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub alpha: f64,
    /// Surround-rig map size.
    pub width: usize,
    pub height: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            alpha: occdrive_render::DEFAULT_ALPHA,
            width: 48,
            height: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// Rendered sequences to sample videos for.
    pub clips: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 20, clips: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub predictor: PredictorConfig,
    pub train_vae: TrainConfig,
    pub train_pred: TrainConfig,
    pub train_e2e: TrainConfig,
    pub eval: EvalConfig,
    pub render: RenderConfig,
    pub video: VideoConfig,
    pub video_train: VideoTrainConfig,
    pub video_data: ToyDataConfig,
    pub sample: SampleConfig,
}

fn optim(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        min_lr: lr * 0.05,
        warmup_steps: 20,
        ..Default::default()
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            predictor: PredictorConfig::default(),
            train_vae: TrainConfig {
                phase: Phase::Vae,
                epochs: 10,
                batch_size: 8,
                eval_every: 10,
                optim: optim(2e-3),
                ..Default::default()
            },
            train_pred: TrainConfig {
                phase: Phase::Predictor,
                epochs: 12,
                batch_size: 8,
                eval_every: 12,
                optim: optim(1e-3),
                ..Default::default()
            },
            train_e2e: TrainConfig {
                phase: Phase::E2e,
                epochs: 4,
                batch_size: 4,
                eval_every: 1,
                rollout_steps: 6,
                optim: optim(3e-4),
                ..Default::default()
            },
            eval: EvalConfig::default(),
            render: RenderConfig::default(),
            video: VideoConfig::default(),
            video_train: VideoTrainConfig {
                steps: 600,
                ..Default::default()
            },
            video_data: ToyDataConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(cfg_err)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Pin the training phases and seeds, then validate every section.
    pub fn finalize(mut self) -> Result<Self> {
        self.train_vae.phase = Phase::Vae;
        self.train_pred.phase = Phase::Predictor;
        self.train_e2e.phase = Phase::E2e;
        for t in [&mut self.train_vae, &mut self.train_pred, &mut self.train_e2e] {
            t.seed = self.seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let gen = &self.data.gen;
        if gen.seq_len < 2 || self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(cfg_err("data needs seq_len >= 2 and at least one train, val and test sequence"));
        }
        if self.data.test_seq_len < self.eval.past + self.eval.future {
            return Err(cfg_err(format!(
                "test_seq_len {} cannot hold {} past + {} future frames",
                self.data.test_seq_len, self.eval.past, self.eval.future
            )));
        }
        if self.eval.past == 0 || self.eval.future == 0 || self.eval.batch == 0 {
            return Err(cfg_err("eval past, future and batch must be positive"));
        }
        let palette = occdrive_core::LabelPalette::driving().n_classes;
        if gen.n_classes != palette {
            return Err(cfg_err(format!("data.gen.n_classes is {}, the driving palette has {palette}", gen.n_classes)));
        }
        if self.vae.n_classes != gen.n_classes || self.video.n_classes != gen.n_classes {
            return Err(cfg_err(format!(
                "class counts differ: data {}, vae {}, video {}",
                gen.n_classes, self.vae.n_classes, self.video.n_classes
            )));
        }
        if self.vae.channels != self.predictor.channels {
            return Err(cfg_err("predictor channels must equal the VAE latent width"));
        }
        if self.video.frames > gen.seq_len {
            return Err(cfg_err(format!("video needs {} frames, sequences have {}", self.video.frames, gen.seq_len)));
        }
        if !(self.render.alpha > 0.0 && self.render.alpha <= 1.0) || self.render.width == 0 || self.render.height == 0 {
            return Err(cfg_err("render alpha must be in (0, 1] and map size positive"));
        }
        if self.sample.steps == 0 {
            return Err(cfg_err("sample.steps must be >= 1"));
        }
        self.vae.validate().map_err(cfg_err)?;
        self.predictor.validate().map_err(cfg_err)?;
        for t in [&self.train_vae, &self.train_pred, &self.train_e2e] {
            t.validate().map_err(cfg_err)?;
        }
        self.video.validate().map_err(cfg_err)?;
        self.video_train.validate().map_err(cfg_err)?;
        Ok(())
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            past: self.eval.past,
            future: self.eval.future,
            fps: self.data.gen.fps,
            batch: self.eval.batch,
        }
    }

    /// Canonical JSON of the resolved config; hashing it ignores formatting,
    /// comments and key order of the source file.
    pub fn normalized(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.normalized().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(Config::from_toml("[vae]\nchanels = 8").is_err());
        assert!(Config::from_toml("[train_vae.optim]\nlr = 0.01\nmomentum = 0.9").is_err());
        let c = Config::from_toml("[train_vae.optim]\nlr = 0.01").unwrap();
        assert_eq!(c.train_vae.optim.lr, 0.01);
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = Config::from_toml("seed = 3\n[eval]\npast = 4").unwrap();
        let b = Config::from_toml("# comment\nseed   = 3\n\n[eval]\npast=4 # default").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), Config::default().hash());
    }

    #[test]
    fn validation_catches_inconsistent_sections() {
        let mut c = Config::default();
        c.predictor.channels = 32;
        assert!(matches!(c.finalize(), Err(CliError::Config(_))));
        let mut c = Config::default();
        c.data.test_seq_len = 5;
        assert!(c.finalize().is_err());
        assert!(Config::default().finalize().is_ok());
    }
}
