//! Control-conditioned next-latent predictor.
//!
//! Tri-plane tokens and control tokens exchange information through stacked
//! mutual control attention layers; an intermediate control latent is decoded
//! to the ego rigid motion; the fused latent goes through spatial-temporal
//! blocks that mix in the `k` previous latents along the channel axis.

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};
use occdrive_core::{Command, ControlSignal, RigidTransform2D};
use occdrive_nn::{Init, LayerNorm, Mlp, MultiHeadAttention, ParamStore, Scope};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Token width; must match the VAE latent width.
    pub channels: usize,
    pub heads: usize,
    /// Number of mutual control attention layers (L).
    pub mca_layers: usize,
    /// 1-based layer whose control latent feeds the transform head and fusion (m).
    pub transform_layer: usize,
    /// Spatial-temporal blocks (S).
    pub st_blocks: usize,
    /// History window (k).
    pub history: usize,
    pub max_waypoints: usize,
    /// Waypoint coordinates are divided by this before embedding (meters).
    pub waypoint_scale: f64,
    /// Layer-normalize branch inputs. Off gives the bare residual updates.
    pub pre_norm: bool,
    /// Weight of the transform regression (λ).
    pub lambda: f64,
    /// Per-step latent weights (β_t); missing entries default to 1.
    pub beta: Vec<f64>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 4,
            mca_layers: 4,
            transform_layer: 2,
            st_blocks: 2,
            history: 3,
            max_waypoints: 8,
            waypoint_scale: 4.0,
            pre_norm: true,
            lambda: 0.1,
            beta: Vec::new(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.transform_layer == 0 || self.transform_layer > self.mca_layers {
            return bad(format!("need 1 <= m ({}) <= L ({})", self.transform_layer, self.mca_layers));
        }
        if self.history == 0 {
            return bad("history window k must be >= 1".into());
        }
        if self.lambda < 0.0 || self.beta.iter().any(|b| *b < 0.0 || !b.is_finite()) {
            return bad("loss weights must be non-negative".into());
        }
        if self.waypoint_scale <= 0.0 || self.max_waypoints == 0 {
            return bad("waypoint_scale and max_waypoints must be positive".into());
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta.get(t).copied().unwrap_or(1.0)
    }
}

fn maybe_norm(ln: &Option<LayerNorm>, x: &Tensor) -> Result<Tensor> {
    Ok(match ln {
        Some(ln) => ln.forward(x)?,
        None => x.clone(),
    })
}

fn norm_opt(s: &mut Scope<'_>, name: &str, c: usize, on: bool) -> Result<Option<LayerNorm>> {
    Ok(if on { Some(LayerNorm::new(&mut s.pp(name), c)?) } else { None })
}

/// Command table plus per-waypoint MLP; token 0 is the command.
#[derive(Debug, Clone)]
pub struct ControlEmbedding {
    commands: Tensor,
    waypoint_mlp: Mlp,
    slots: Tensor,
    scale: f64,
}

impl ControlEmbedding {
    fn new(s: &mut Scope<'_>, cfg: &PredictorConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            commands: s.get("command", &[Command::ALL.len(), c], Init::Normal(0.5))?,
            waypoint_mlp: Mlp::new(&mut s.pp("waypoint"), 2, c, c)?,
            slots: s.get("slot", &[cfg.max_waypoints, c], Init::Normal(0.1))?,
            scale: cfg.waypoint_scale,
        })
    }

    /// Tokens `(w + 1, C)` for one control signal.
    pub fn embed(&self, ctrl: &ControlSignal) -> Result<Tensor> {
        let n = ctrl.waypoints.len();
        if n == 0 || n > self.slots.dim(0)? {
            return Err(WorldError::Shape(format!("{n} waypoints, embedding supports 1..={}", self.slots.dim(0)?)));
        }
        let cmd = self.commands.narrow(0, ctrl.command.index(), 1)?;
        let xy: Vec<f64> = ctrl.waypoints.iter().flat_map(|p| [p[0] / self.scale, p[1] / self.scale]).collect();
        let xy = Tensor::from_vec(xy, (n, 2), &Device::Cpu)?.to_dtype(self.commands.dtype())?;
        let wp = (self.waypoint_mlp.forward(&xy)? + self.slots.narrow(0, 0, n)?)?;
        Ok(Tensor::cat(&[&cmd, &wp], 0)?)
    }

    /// Batched tokens `(N, w + 1, C)`; all signals need the same waypoint count.
    pub fn embed_batch(&self, ctrls: &[&ControlSignal]) -> Result<Tensor> {
        let toks = ctrls.iter().map(|c| self.embed(c)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&toks, 0)?)
    }
}

/// One mutual control attention layer:
/// `Z' = Z + Attn(Z, c)`, `Z⁺ = Z' + Attn(Z', Z')`, `c⁺ = c + Attn(c, Z⁺)`.
#[derive(Debug, Clone)]
pub struct MutualControlAttention {
    ln_z1: Option<LayerNorm>,
    ln_c1: Option<LayerNorm>,
    z_from_c: MultiHeadAttention,
    ln_z2: Option<LayerNorm>,
    z_self: MultiHeadAttention,
    ln_c2: Option<LayerNorm>,
    ln_z3: Option<LayerNorm>,
    c_from_z: MultiHeadAttention,
}

impl MutualControlAttention {
    pub fn new(s: &mut Scope<'_>, c: usize, heads: usize, pre_norm: bool) -> Result<Self> {
        Ok(Self {
            ln_z1: norm_opt(s, "ln_z1", c, pre_norm)?,
            ln_c1: norm_opt(s, "ln_c1", c, pre_norm)?,
            z_from_c: MultiHeadAttention::new(&mut s.pp("z_from_c"), c, heads)?,
            ln_z2: norm_opt(s, "ln_z2", c, pre_norm)?,
            z_self: MultiHeadAttention::new(&mut s.pp("z_self"), c, heads)?,
            ln_c2: norm_opt(s, "ln_c2", c, pre_norm)?,
            ln_z3: norm_opt(s, "ln_z3", c, pre_norm)?,
            c_from_z: MultiHeadAttention::new(&mut s.pp("c_from_z"), c, heads)?,
        })
    }

    /// `z: (N, T, C)`, `c: (N, n_ctrl, C)`, `pos: (1, T, C)` added to occupancy
    /// queries and keys inside the branches only.
    pub fn forward(&self, z: &Tensor, c: &Tensor, pos: &Tensor) -> Result<(Tensor, Tensor)> {
        let zn = maybe_norm(&self.ln_z1, z)?;
        let cn = maybe_norm(&self.ln_c1, c)?;
        let z1 = (z + self.z_from_c.forward_qkv(&zn.broadcast_add(pos)?, &cn, &cn)?)?;
        let zn = maybe_norm(&self.ln_z2, &z1)?;
        let zp = zn.broadcast_add(pos)?;
        let z2 = (&z1 + self.z_self.forward_qkv(&zp, &zp, &zn)?)?;
        let cn = maybe_norm(&self.ln_c2, c)?;
        let zn = maybe_norm(&self.ln_z3, &z2)?;
        let c2 = (c + self.c_from_z.forward_qkv(&cn, &zn.broadcast_add(pos)?, &zn)?)?;
        Ok((z2, c2))
    }
}

/// Mean-pooled control latent → `(cos, sin, tx, ty)` with unit (cos, sin).
#[derive(Debug, Clone)]
pub struct TransformHead {
    mlp: Mlp,
}

impl TransformHead {
    fn new(s: &mut Scope<'_>, c: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&mut s.pp("mlp"), c, c, 4)?,
        })
    }

    /// `c: (N, n_ctrl, C)` → `(N, 4)`.
    pub fn forward(&self, c: &Tensor) -> Result<Tensor> {
        let raw = self.mlp.forward(&c.mean(1)?)?;
        // bias toward the identity rotation so the renormalization starts well-defined
        let cs = (raw.narrow(1, 0, 1)? + 1.0)?;
        let sn = raw.narrow(1, 1, 1)?;
        Ok(Tensor::cat(&[&cs, &sn, &raw.narrow(1, 2, 2)?], 1).and_then(|t| renormalize_rotation(&t))?)
    }
}

/// Scale the `(cos, sin)` columns of `(N, 4)` transform params to unit length.
pub fn renormalize_rotation(p: &Tensor) -> candle_core::Result<Tensor> {
    let rot = p.narrow(1, 0, 2)?;
    let norm = (rot.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Tensor::cat(&[&rot.broadcast_div(&norm)?, &p.narrow(1, 2, 2)?], 1)
}

/// `(N, 4)` `(cos, sin, tx, ty)` rows for a list of rigid transforms.
pub fn transform_params(ts: &[RigidTransform2D], dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = ts.iter().flat_map(|t| [t.theta.cos(), t.theta.sin(), t.tx, t.ty]).collect();
    Ok(Tensor::from_vec(v, (ts.len(), 4), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn params_to_transform(row: &[f64]) -> RigidTransform2D {
    RigidTransform2D::new(row[1].atan2(row[0]), row[2], row[3])
}

/// Homogeneous 3×3 matrices `(N, 3, 3)` from `(N, 4)` params.
pub fn params_to_matrix(p: &Tensor) -> Result<Tensor> {
    let n = p.dim(0)?;
    let c = p.narrow(1, 0, 1)?;
    let s = p.narrow(1, 1, 1)?;
    let tx = p.narrow(1, 2, 1)?;
    let ty = p.narrow(1, 3, 1)?;
    let zero = c.zeros_like()?;
    let one = c.ones_like()?;
    let rows = Tensor::cat(&[&c, &s.neg()?, &tx, &s, &c, &ty, &zero, &zero, &one], 1)?;
    Ok(rows.reshape((n, 3, 3))?)
}

/// Squared Frobenius distance between predicted and ground-truth matrices, per row `(N,)`.
pub fn transform_reg(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let diff = (params_to_matrix(pred)? - params_to_matrix(gt)?)?;
    Ok(diff.sqr()?.sum(2)?.sum(1)?)
}

/// Self-attention over the tri-plane tokens, a feed-forward layer, then a
/// temporal MLP over the channel-concatenated history.
#[derive(Debug, Clone)]
pub struct SpatialTemporalBlock {
    ln_attn: Option<LayerNorm>,
    attn: MultiHeadAttention,
    ln_ffn: Option<LayerNorm>,
    ffn: Mlp,
    ln_time: Option<LayerNorm>,
    temporal: Mlp,
}

impl SpatialTemporalBlock {
    fn new(s: &mut Scope<'_>, cfg: &PredictorConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            ln_attn: norm_opt(s, "ln_attn", c, cfg.pre_norm)?,
            attn: MultiHeadAttention::new(&mut s.pp("attn"), c, cfg.heads)?,
            ln_ffn: norm_opt(s, "ln_ffn", c, cfg.pre_norm)?,
            ffn: Mlp::new(&mut s.pp("ffn"), c, 2 * c, c)?,
            ln_time: norm_opt(s, "ln_time", c, cfg.pre_norm)?,
            temporal: Mlp::new(&mut s.pp("temporal"), (cfg.history + 1) * c, c, c)?,
        })
    }

    pub fn forward(&self, z: &Tensor, history: &[Tensor], pos: &Tensor) -> Result<Tensor> {
        let zn = maybe_norm(&self.ln_attn, z)?;
        let zp = zn.broadcast_add(pos)?;
        let z = (z + self.attn.forward_qkv(&zp, &zp, &zn)?)?;
        let z = (&z + self.ffn.forward(&maybe_norm(&self.ln_ffn, &z)?)?)?;
        let mut parts = history.iter().map(|h| maybe_norm(&self.ln_time, h)).collect::<Result<Vec<_>>>()?;
        parts.push(maybe_norm(&self.ln_time, &z)?);
        let cat = Tensor::cat(&parts, 2)?;
        Ok((&z + self.temporal.forward(&cat)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct PredictOutput {
    /// Predicted next tokens `(N, T, C)`.
    pub z_next: Tensor,
    /// Transform-head output `(N, 4)`.
    pub transform: Tensor,
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    /// Token grid `(h, w + 2d)`.
    pub token_dims: (usize, usize),
    pub control: ControlEmbedding,
    pos: Tensor,
    mca: Vec<MutualControlAttention>,
    head: TransformHead,
    ln_fuse_z: Option<LayerNorm>,
    ln_fuse_c: Option<LayerNorm>,
    fuse: MultiHeadAttention,
    st: Vec<SpatialTemporalBlock>,
}

impl Predictor {
    /// `latent_dims = (h, w, d)` of the VAE latent.
    pub fn new(store: &mut ParamStore, cfg: &PredictorConfig, latent_dims: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let [h, w, d] = latent_dims;
        if h != w {
            return Err(WorldError::Shape(format!("token layout needs h == w, got {h} and {w}")));
        }
        let c = cfg.channels;
        let token_dims = (h, w + 2 * d);
        let mut root = store.root();
        let control = ControlEmbedding::new(&mut root.pp("control"), cfg)?;
        let pos = root.get("pos", &[1, token_dims.0 * token_dims.1, c], Init::Normal(0.1))?;
        let mca = (0..cfg.mca_layers)
            .map(|i| MutualControlAttention::new(&mut root.pp(format!("mca{i}")), c, cfg.heads, cfg.pre_norm))
            .collect::<Result<Vec<_>>>()?;
        let head = TransformHead::new(&mut root.pp("transform_head"), c)?;
        let ln_fuse_z = norm_opt(&mut root, "fuse_ln_z", c, cfg.pre_norm)?;
        let ln_fuse_c = norm_opt(&mut root, "fuse_ln_c", c, cfg.pre_norm)?;
        let fuse = MultiHeadAttention::new(&mut root.pp("fuse"), c, cfg.heads)?;
        let st = (0..cfg.st_blocks)
            .map(|i| SpatialTemporalBlock::new(&mut root.pp(format!("st{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            token_dims,
            control,
            pos,
            mca,
            head,
            ln_fuse_z,
            ln_fuse_c,
            fuse,
            st,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.token_dims.0 * self.token_dims.1
    }

    fn check_tokens(&self, z: &Tensor) -> Result<()> {
        let (_, t, c) = z.dims3()?;
        if t != self.num_tokens() || c != self.cfg.channels {
            return Err(WorldError::Shape(format!(
                "tokens {:?}, predictor expects (_, {}, {})",
                z.dims(),
                self.num_tokens(),
                self.cfg.channels
            )));
        }
        Ok(())
    }

    /// One step. `z: (N, T, C)` current tokens, `ctrl: (N, n_ctrl, C)` embedded
    /// controls, `history`: the `k` previous token tensors, oldest first.
    pub fn forward(&self, z: &Tensor, ctrl: &Tensor, history: &[Tensor]) -> Result<PredictOutput> {
        self.check_tokens(z)?;
        if history.len() != self.cfg.history {
            return Err(WorldError::Shape(format!("{} history latents, expected {}", history.len(), self.cfg.history)));
        }
        for h in history {
            self.check_tokens(h)?;
        }
        let (mut z, mut c) = (z.clone(), ctrl.clone());
        let mut transform = None;
        for (i, layer) in self.mca.iter().enumerate() {
            let (zn, cn) = layer.forward(&z, &c, &self.pos)?;
            z = zn;
            c = cn;
            if i + 1 == self.cfg.transform_layer {
                transform = Some(self.head.forward(&c)?);
                let q = maybe_norm(&self.ln_fuse_z, &z)?.broadcast_add(&self.pos)?;
                let kv = maybe_norm(&self.ln_fuse_c, &c)?;
                z = (&z + self.fuse.forward(&q, &kv)?)?;
            }
        }
        for blk in &self.st {
            z = blk.forward(&z, history, &self.pos)?;
        }
        Ok(PredictOutput {
            z_next: z,
            transform: transform.expect("transform layer within range"),
        })
    }

    /// Names of the parameters whose zeroing turns every residual branch off.
    pub fn is_branch_output(name: &str) -> bool {
        name.ends_with(".o.w")
            || name.ends_with(".o.b")
            || (name.contains(".ffn.fc2.") || name.contains(".temporal.fc2."))
    }
}

/// Sliding window of the current latent and its `k` predecessors.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    k: usize,
    entries: VecDeque<Tensor>,
}

impl HistoryBuffer {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            entries: VecDeque::with_capacity(k + 1),
        }
    }

    pub fn push(&mut self, z: Tensor) {
        if self.entries.len() == self.k + 1 {
            self.entries.pop_front();
        }
        self.entries.push_back(z);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `k + 1` entries oldest→newest, left-padded with the oldest.
    pub fn window(&self) -> Result<Vec<Tensor>> {
        let oldest = self.entries.front().ok_or_else(|| WorldError::Empty("history buffer".into()))?;
        let pad = self.k + 1 - self.entries.len();
        Ok(std::iter::repeat(oldest.clone()).take(pad).chain(self.entries.iter().cloned()).collect())
    }

    /// `(current, history)` split of [`HistoryBuffer::window`].
    pub fn split(&self) -> Result<(Tensor, Vec<Tensor>)> {
        let mut w = self.window()?;
        let cur = w.pop().expect("non-empty window");
        Ok((cur, w))
    }
}

pub struct PredictionLoss {
    pub total: Tensor,
    pub latent: Vec<Tensor>,
    pub reg: Tensor,
}

/// `Σ_t β_t · MSE(pred_t, target_t) + λ · mean_t L_reg(t)`.
pub fn prediction_loss(
    pred: &[Tensor],
    target: &[Tensor],
    transform_pred: &[Tensor],
    transform_gt: &[Tensor],
    cfg: &PredictorConfig,
) -> Result<PredictionLoss> {
    if pred.len() != target.len() || pred.len() != transform_pred.len() || pred.len() != transform_gt.len() {
        return Err(WorldError::Shape(format!(
            "loss lists of lengths {}, {}, {}, {}",
            pred.len(),
            target.len(),
            transform_pred.len(),
            transform_gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(WorldError::Empty("no prediction steps".into()));
    }
    let mut latent = Vec::with_capacity(pred.len());
    let mut total: Option<Tensor> = None;
    let mut reg: Option<Tensor> = None;
    for t in 0..pred.len() {
        let mse = (&pred[t] - &target[t])?.sqr()?.mean_all()?;
        let term = (&mse * cfg.beta_at(t))?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
        latent.push(mse);
        let r = transform_reg(&transform_pred[t], &transform_gt[t])?.mean_all()?;
        reg = Some(match reg {
            None => r,
            Some(acc) => (acc + r)?,
        });
    }
    let reg = (reg.expect("non-empty") / pred.len() as f64)?;
    let total = (total.expect("non-empty") + (&reg * cfg.lambda)?)?;
    Ok(PredictionLoss { total, latent, reg })
}
