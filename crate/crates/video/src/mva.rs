//! Normalized multi-view attention.
//!
//! Tokens of all views that share a frame and an image row form one group;
//! attention runs inside each group and its output is renormalized to the
//! group's trunk statistics before a residual add scaled by `eta`.

use candle_core::{Tensor, D};
use occdrive_nn::{MultiHeadAttention, Scope};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VideoError};

pub const MVA_EPS: f64 = 1e-5;

/// Axes over which branch and trunk statistics are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One mean/std per group over its tokens and channels jointly.
    #[default]
    Group,
    /// One mean/std per group and channel over the group's tokens.
    PerChannel,
    /// No renormalization: `Z + eta * M` (ablation).
    None,
}

/// `(n, t·h·w, C)` → `(t·h, n·w, C)`.
pub fn rearrange_views(z: &Tensor, t: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(rearrange_views_batched(&z.unsqueeze(0)?, t, h, w)?)
}

/// Inverse of [`rearrange_views`] for `n` views.
pub fn unrearrange_views(z: &Tensor, n: usize, t: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(unrearrange_views_batched(z, 1, n, t, h, w)?.squeeze(0)?)
}

/// `(B, n, t·h·w, C)` → `(B·t·h, n·w, C)`.
pub fn rearrange_views_batched(z: &Tensor, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, l, c) = z.dims4()?;
    if l != t * h * w {
        return Err(VideoError::Shape(format!("{l} tokens do not factor as {t}x{h}x{w}")));
    }
    let z = z.reshape(vec![b, n, t, h, w, c])?.permute(vec![0, 2, 3, 1, 4, 5])?;
    Ok(z.contiguous()?.reshape((b * t * h, n * w, c))?)
}

/// `(B·t·h, n·w, C)` → `(B, n, t·h·w, C)`.
pub fn unrearrange_views_batched(z: &Tensor, b: usize, n: usize, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let (g, l, c) = z.dims3()?;
    if g != b * t * h || l != n * w {
        return Err(VideoError::Shape(format!("({g}, {l}) groups do not match b={b} n={n} t={t} h={h} w={w}")));
    }
    let z = z.reshape(vec![b, t, h, n, w, c])?.permute(vec![0, 3, 1, 2, 4, 5])?;
    Ok(z.contiguous()?.reshape((b, n, t * h * w, c))?)
}

fn moments(x: &Tensor, mode: NormMode) -> Result<(Tensor, Tensor)> {
    let (mean, var) = match mode {
        NormMode::PerChannel => {
            let mu = x.mean_keepdim(1)?;
            let var = x.broadcast_sub(&mu)?.sqr()?.mean_keepdim(1)?;
            (mu, var)
        }
        _ => {
            let mu = x.mean_keepdim(D::Minus1)?.mean_keepdim(1)?;
            let var = x.broadcast_sub(&mu)?.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(1)?;
            (mu, var)
        }
    };
    Ok((mean, var.sqrt()?))
}

/// `eta · ((M − μ_M) / (σ_M + ε) · σ_Z + μ_Z)` for `M` the in-group attention
/// output; `eta · M` when normalization is off.
pub fn mva_branch(z: &Tensor, m: &Tensor, eta: f64, mode: NormMode, eps: f64) -> Result<Tensor> {
    if mode == NormMode::None {
        return Ok((m * eta)?);
    }
    let (mu_m, sd_m) = moments(m, mode)?;
    let (mu_z, sd_z) = moments(z, mode)?;
    let r = m.broadcast_sub(&mu_m)?.broadcast_div(&(sd_m + eps)?)?;
    Ok((r.broadcast_mul(&sd_z)?.broadcast_add(&mu_z)? * eta)?)
}

#[derive(Debug, Clone)]
pub struct NormalizedMva {
    pub attn: MultiHeadAttention,
    pub eta: f64,
    pub mode: NormMode,
    pub eps: f64,
}

impl NormalizedMva {
    pub fn new(s: &mut Scope<'_>, dim: usize, heads: usize, eta: f64, mode: NormMode) -> Result<Self> {
        if !(eta >= 0.0) {
            return Err(VideoError::Config(format!("eta must be >= 0, got {eta}")));
        }
        Ok(Self {
            attn: MultiHeadAttention::new(&mut s.pp("attn"), dim, heads)?,
            eta,
            mode,
            eps: MVA_EPS,
        })
    }

    /// The rescaled branch before the residual add; `z: (groups, n·w, C)`.
    pub fn branch(&self, z: &Tensor) -> Result<Tensor> {
        let m = self.attn.forward(z, z)?;
        mva_branch(z, &m, self.eta, self.mode, self.eps)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if self.eta == 0.0 {
            return Ok(z.clone());
        }
        Ok((z + self.branch(z)?)?)
    }
}

/// [`normalized_mva`] on view-major tokens `(B, n, t·h·w, C)`.
pub fn normalized_mva(z: &Tensor, mva: &NormalizedMva) -> Result<Tensor> {
    mva.forward(z)
}
