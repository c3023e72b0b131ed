//! Patch transformer with adaptive layer modulation on the timestep, one
//! normalized multi-view attention block after every `mva.stride` blocks.

use candle_core::{DType, Device, Tensor, D};
use occdrive_nn::{layer_norm, Init, Linear, Mlp, MultiHeadAttention, ParamStore, Scope};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VideoError};
use crate::flow::VelocityModel;
use crate::mva::{rearrange_views_batched, unrearrange_views_batched, NormMode, NormalizedMva};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MvaSettings {
    pub enabled: bool,
    pub eta: f64,
    /// Insert after blocks `stride-1, 2·stride-1, ...`.
    pub stride: usize,
    pub norm: NormMode,
}

impl Default for MvaSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            eta: 1.0,
            stride: 1,
            norm: NormMode::Group,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoConfig {
    pub views: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Palette size; the condition carries one extra background channel.
    pub n_classes: usize,
    pub mva: MvaSettings,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            views: 2,
            frames: 8,
            channels: 3,
            height: 32,
            width: 32,
            patch: 4,
            hidden: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            n_classes: 6,
            mva: MvaSettings::default(),
        }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VideoError::Config(m));
        if self.views == 0 || self.frames == 0 || self.channels == 0 || self.blocks == 0 {
            return bad("views, frames, channels and blocks must be positive".into());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}x{} image does not tile by patch {}", self.height, self.width, self.patch));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || self.hidden % 2 != 0 {
            return bad(format!("hidden {} must be even and divisible by {} heads", self.hidden, self.heads));
        }
        if self.mlp_ratio == 0 || self.n_classes == 0 {
            return bad("mlp_ratio and n_classes must be positive".into());
        }
        if self.mva.stride == 0 || !(self.mva.eta >= 0.0) {
            return bad(format!("mva stride {} / eta {} invalid", self.mva.stride, self.mva.eta));
        }
        Ok(())
    }

    pub fn cond_channels(&self) -> usize {
        self.n_classes + 1
    }

    /// Token grid `(t, h, w)` per view.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames, self.height / self.patch, self.width / self.patch)
    }

    /// `(n, t, c, H, W)`.
    pub fn video_shape(&self) -> [usize; 5] {
        [self.views, self.frames, self.channels, self.height, self.width]
    }

    pub fn has_mva_after(&self, block: usize) -> bool {
        self.mva.enabled && (block + 1) % self.mva.stride == 0
    }
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> candle_core::Result<Tensor> {
    x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)
}

#[derive(Debug, Clone)]
struct Block {
    ada: Linear,
    attn: MultiHeadAttention,
    mlp: Mlp,
}

impl Block {
    fn new(s: &mut Scope<'_>, cfg: &VideoConfig) -> Result<Self> {
        let c = cfg.hidden;
        Ok(Self {
            ada: Linear::zeros(&mut s.pp("ada"), c, 6 * c)?,
            attn: MultiHeadAttention::new(&mut s.pp("attn"), c, cfg.heads)?,
            mlp: Mlp::new(&mut s.pp("mlp"), c, cfg.mlp_ratio * c, c)?,
        })
    }

    /// `x: (B, n, L, C)`, `cond: (B, C)` already passed through SiLU.
    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, n, l, c) = x.dims4()?;
        let m = self.ada.forward(cond)?.reshape((b, 1, 1, 6 * c))?;
        let part = |i: usize| m.narrow(D::Minus1, i * c, c);
        let h = modulate(&layer_norm(x, LN_EPS)?, &part(0)?, &part(1)?)?;
        let h = h.reshape((b * n, l, c))?;
        let a = self.attn.forward(&h, &h)?.reshape((b, n, l, c))?;
        let x = (x + a.broadcast_mul(&part(2)?)?)?;
        let h = modulate(&layer_norm(&x, LN_EPS)?, &part(3)?, &part(4)?)?;
        let f = self.mlp.forward(&h)?;
        Ok((&x + f.broadcast_mul(&part(5)?)?)?)
    }
}

/// Trunk and MVA-branch standard deviations recorded at one MVA block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvaProbe {
    pub trunk_std: f64,
    pub branch_std: f64,
}

#[derive(Debug, Clone)]
pub struct ToyVideoModel {
    pub cfg: VideoConfig,
    embed_x: Linear,
    embed_c: Linear,
    embed_in: Linear,
    pos_t: Tensor,
    pos_h: Tensor,
    pos_w: Tensor,
    view: Tensor,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    mvas: Vec<Option<NormalizedMva>>,
    final_ada: Linear,
    final_out: Linear,
    dtype: DType,
}

impl ToyVideoModel {
    pub fn new(store: &mut ParamStore, cfg: &VideoConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = store.dtype();
        let mut root = store.root();
        let s = &mut root;
        let (t, h, w) = cfg.grid();
        let (c, p) = (cfg.hidden, cfg.patch);
        let px = p * p * cfg.channels;
        let pc = p * p * cfg.cond_channels();
        let embed_x = Linear::new(&mut s.pp("embed.x"), px, c)?;
        let embed_c = Linear::new(&mut s.pp("embed.c"), pc, c)?;
        let embed_in = Linear::new(&mut s.pp("embed.in"), 2 * c, c)?;
        let pos_t = s.get("pos.t", &[t, 1, 1, c], Init::Normal(0.02))?;
        let pos_h = s.get("pos.h", &[1, h, 1, c], Init::Normal(0.02))?;
        let pos_w = s.get("pos.w", &[1, 1, w, c], Init::Normal(0.02))?;
        let view = s.get("view", &[cfg.views, 1, c], Init::Normal(0.02))?;
        let time_in = Linear::new(&mut s.pp("time.in"), c, c)?;
        let time_out = Linear::new(&mut s.pp("time.out"), c, c)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut mvas = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            blocks.push(Block::new(&mut s.pp(format!("block{i}")), cfg)?);
            mvas.push(if cfg.has_mva_after(i) {
                Some(NormalizedMva::new(&mut s.pp(format!("mva{i}")), c, cfg.heads, cfg.mva.eta, cfg.mva.norm)?)
            } else {
                None
            });
        }
        Ok(Self {
            cfg: *cfg,
            embed_x,
            embed_c,
            embed_in,
            pos_t,
            pos_h,
            pos_w,
            view,
            time_in,
            time_out,
            blocks,
            mvas,
            final_ada: Linear::zeros(&mut s.pp("final.ada"), c, 2 * c)?,
            final_out: Linear::zeros(&mut s.pp("final.out"), c, px)?,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// `(B, n, t, c, H, W)` → `(B, n, t·h·w, p·p·c)`.
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let [b, n, t, c, hh, ww] = dims6(x)?;
        let p = self.cfg.patch;
        let (h, w) = (hh / p, ww / p);
        let x = x.reshape(vec![b * n * t, c, h, p, w, p])?.permute(vec![0, 2, 4, 3, 5, 1])?;
        Ok(x.contiguous()?.reshape((b, n, t * h * w, p * p * c))?)
    }

    pub fn unpatchify(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _, _) = x.dims4()?;
        let cfg = &self.cfg;
        let (t, h, w) = cfg.grid();
        let (p, c) = (cfg.patch, cfg.channels);
        let x = x.reshape(vec![b * n * t, h, w, p, p, c])?.permute(vec![0, 5, 1, 3, 2, 4])?;
        Ok(x.contiguous()?.reshape(vec![b, n, t, c, h * p, w * p])?)
    }

    /// One-hot condition `(B, n, t, H, W, K+1)` → `(B, n, t·h·w, p·p·(K+1))`.
    fn patchify_cond(&self, cond: &Tensor) -> Result<Tensor> {
        let [b, n, t, hh, ww, k] = dims6(cond)?;
        let p = self.cfg.patch;
        let (h, w) = (hh / p, ww / p);
        let c = cond.reshape(vec![b * n * t, h, p, w, p, k])?.permute(vec![0, 1, 3, 2, 4, 5])?;
        Ok(c.contiguous()?.reshape((b, n, t * h * w, p * p * k))?)
    }

    fn timestep_embedding(&self, time: &Tensor) -> Result<Tensor> {
        let half = self.cfg.hidden / 2;
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        let freqs = Tensor::from_vec(freqs, (1, half), time.device())?.to_dtype(self.dtype)?;
        let arg = (time.to_dtype(self.dtype)?.unsqueeze(1)? * 1000.0)?.broadcast_mul(&freqs)?;
        Ok(Tensor::cat(&[arg.cos()?, arg.sin()?], 1)?)
    }

    fn check_inputs(&self, x: &Tensor, cond: &Tensor, time: &Tensor) -> Result<()> {
        let cfg = &self.cfg;
        let b = x.dim(0)?;
        let want_x = [b, cfg.views, cfg.frames, cfg.channels, cfg.height, cfg.width];
        let want_c = [b, cfg.views, cfg.frames, cfg.height, cfg.width, cfg.cond_channels()];
        if x.dims() != want_x || cond.dims() != want_c || time.dims() != [b] {
            return Err(VideoError::Shape(format!(
                "video {:?} / condition {:?} / time {:?}; expected {want_x:?} / {want_c:?} / [{b}]",
                x.dims(),
                cond.dims(),
                time.dims()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, cond: &Tensor, time: &Tensor, mut probes: Option<&mut Vec<MvaProbe>>) -> Result<Tensor> {
        self.check_inputs(x, cond, time)?;
        let x = x.to_dtype(self.dtype)?;
        let cond = cond.to_dtype(self.dtype)?;
        let (b, n) = (x.dim(0)?, self.cfg.views);
        let (t, h, w) = self.cfg.grid();
        let c = self.cfg.hidden;

        let ex = self.embed_x.forward(&self.patchify(&x)?)?;
        let ec = self.embed_c.forward(&self.patchify_cond(&cond)?)?;
        let mut z = self.embed_in.forward(&Tensor::cat(&[ex, ec], D::Minus1)?)?;
        let pos = self.pos_t.broadcast_add(&self.pos_h)?.broadcast_add(&self.pos_w)?.reshape((t * h * w, c))?;
        z = z.broadcast_add(&pos)?.broadcast_add(&self.view)?;

        let temb = self.timestep_embedding(time)?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;
        let mod_in = temb.silu()?;

        for (block, mva) in self.blocks.iter().zip(&self.mvas) {
            z = block.forward(&z, &mod_in)?;
            if let Some(mva) = mva {
                let g = rearrange_views_batched(&z, t, h, w)?;
                let g = match probes.as_deref_mut() {
                    Some(out) => {
                        let branch = mva.branch(&g)?;
                        out.push(MvaProbe {
                            trunk_std: std_all(&g)?,
                            branch_std: std_all(&branch)?,
                        });
                        (&g + branch)?
                    }
                    None => mva.forward(&g)?,
                };
                z = unrearrange_views_batched(&g, b, n, t, h, w)?;
            }
        }

        let m = self.final_ada.forward(&mod_in)?.reshape((b, 1, 1, 2 * c))?;
        let z = modulate(&layer_norm(&z, LN_EPS)?, &m.narrow(D::Minus1, 0, c)?, &m.narrow(D::Minus1, c, c)?)?;
        self.unpatchify(&self.final_out.forward(&z)?)
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor, time: &Tensor) -> Result<Tensor> {
        self.run(x, cond, time, None)
    }

    /// Forward pass that also reports trunk and branch spread at each MVA block.
    pub fn forward_probed(&self, x: &Tensor, cond: &Tensor, time: &Tensor) -> Result<(Tensor, Vec<MvaProbe>)> {
        let mut probes = Vec::new();
        let out = self.run(x, cond, time, Some(&mut probes))?;
        Ok((out, probes))
    }
}

fn dims6(x: &Tensor) -> Result<[usize; 6]> {
    x.dims().try_into().map_err(|_| VideoError::Shape(format!("expected a rank-6 tensor, got {:?}", x.dims())))
}

fn std_all(x: &Tensor) -> Result<f64> {
    let x = x.to_dtype(DType::F64)?;
    let mu = x.mean_all()?;
    Ok(x.broadcast_sub(&mu)?.sqr()?.mean_all()?.sqrt()?.to_scalar::<f64>()?)
}

impl VelocityModel for ToyVideoModel {
    fn velocity(&self, x_t: &Tensor, cond: &Tensor, time: &Tensor) -> Result<Tensor> {
        self.forward(x_t, cond, time)
    }
}

/// Labels `(B, n, t, H, W)` as `u8` (background = 255) → one-hot
/// `(B, n, t, H, W, K+1)` with background in the last channel.
pub fn condition_one_hot(labels: &[u8], dims: [usize; 5], n_classes: usize, dtype: DType) -> Result<Tensor> {
    let count: usize = dims.iter().product();
    if labels.len() != count {
        return Err(VideoError::Shape(format!("{} labels for condition shape {dims:?}", labels.len())));
    }
    let k = n_classes + 1;
    let mut data = vec![0f32; count * k];
    for (i, &l) in labels.iter().enumerate() {
        let ch = if l == occdrive_render::BACKGROUND {
            n_classes
        } else if (l as usize) < n_classes {
            l as usize
        } else {
            return Err(VideoError::Shape(format!("label {l} outside palette of {n_classes}")));
        };
        data[i * k + ch] = 1.0;
    }
    let shape = [dims[0], dims[1], dims[2], dims[3], dims[4], k];
    Ok(Tensor::from_vec(data, &shape[..], &Device::Cpu)?.to_dtype(dtype)?)
}
