use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 0,
            grad_clip: Some(1.0),
        }
    }
}

/// AdamW with linear warmup, cosine decay and global-norm clipping.
pub struct Optimizer {
    inner: AdamW,
    vars: Vec<Var>,
    cfg: AdamConfig,
    total_steps: usize,
    step: usize,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig, total_steps: usize) -> Result<Self> {
        let params = ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        let inner = AdamW::new(vars.clone(), params)?;
        Ok(Self {
            inner,
            vars,
            cfg,
            total_steps: total_steps.max(1),
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        if step < c.warmup_steps {
            return c.lr * (step + 1) as f64 / c.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(c.warmup_steps).max(1);
        let t = ((step - c.warmup_steps) as f64 / span as f64).min(1.0);
        c.min_lr + 0.5 * (c.lr - c.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// Backprop `loss`, clip, apply one update. Returns the pre-clip grad norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        self.apply(&mut grads)
    }

    pub fn apply(&mut self, grads: &mut GradStore) -> Result<f64> {
        let norm = grad_norm(&self.vars, grads)?;
        if !norm.is_finite() {
            candle_core::bail!("non-finite gradient norm at step {}", self.step);
        }
        if let Some(max) = self.cfg.grad_clip {
            if norm > max {
                let scale = max / (norm + 1e-12);
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.inner.set_learning_rate(self.lr_at(self.step));
        self.inner.step(grads)?;
        self.step += 1;
        Ok(norm)
    }
}

pub fn grad_norm(vars: &[Var], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}
