//! Reconstruction and regularization losses for the occupancy VAE.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};
use crate::vae::{LatentTriPlane, TriPlane};

/// Log-softmax over the last dim with a detached max shift.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean voxel cross-entropy. `logits: (..., K)`, `labels: (...)` as `u32`.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let k = logits.dim(D::Minus1)?;
    let m = logits.elem_count() / k;
    if labels.elem_count() != m {
        return Err(WorldError::Shape(format!("logits {:?} vs labels {:?}", logits.dims(), labels.dims())));
    }
    let lsm = log_softmax_last(&logits.reshape((m, k))?)?;
    let picked = lsm.gather(&labels.reshape((m, 1))?.to_dtype(DType::U32)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Gradient of the Lovász extension of the Jaccard loss at a ground-truth
/// indicator already sorted by decreasing error.
pub fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = gt_sorted.iter().sum();
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut prev) = (0.0, 0.0);
    for (i, &g) in gt_sorted.iter().enumerate() {
        cum_fg += g;
        let inter = gts - cum_fg;
        let union = gts + (i as f64 + 1.0) - cum_fg;
        let jac = 1.0 - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-softmax over `probs: (S, K, P)` (S independent slices of P pixels)
/// against `labels` of length `S * P`. Each slice averages over the classes
/// present in it; the result is the mean over slices.
pub fn lovasz_softmax_slices(probs: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (s, k, p) = probs.dims3()?;
    if labels.len() != s * p {
        return Err(WorldError::Shape(format!("{} labels for {s} slices of {p}", labels.len())));
    }
    let mut fg = vec![0f64; s * k * p];
    let mut present = vec![false; s * k];
    for si in 0..s {
        for pi in 0..p {
            let c = labels[si * p + pi] as usize;
            if c >= k {
                return Err(WorldError::Shape(format!("label {c} >= {k} classes")));
            }
            fg[(si * k + c) * p + pi] = 1.0;
            present[si * k + c] = true;
        }
    }
    let dtype = probs.dtype();
    let fg_t = Tensor::from_vec(fg.clone(), (s, k, p), probs.device())?.to_dtype(dtype)?;
    let errors = (fg_t - probs)?.abs()?;
    let order = errors.detach().arg_sort_last_dim(false)?;
    let errors_sorted = errors.gather(&order, 2)?;
    let order = order.flatten_all()?.to_vec1::<u32>()?;
    let mut grad = vec![0f64; s * k * p];
    let mut weight = vec![0f64; s * k];
    for si in 0..s {
        let n_present = (0..k).filter(|&c| present[si * k + c]).count() as f64;
        for c in 0..k {
            let row = si * k + c;
            if !present[row] {
                continue;
            }
            let sorted: Vec<f64> = order[row * p..(row + 1) * p].iter().map(|&i| fg[row * p + i as usize]).collect();
            grad[row * p..(row + 1) * p].copy_from_slice(&lovasz_grad(&sorted));
            weight[row] = 1.0 / (n_present * s as f64);
        }
    }
    let grad = Tensor::from_vec(grad, (s, k, p), probs.device())?.to_dtype(dtype)?;
    let weight = Tensor::from_vec(weight, (s, k), probs.device())?.to_dtype(dtype)?;
    let per_class = (errors_sorted * grad)?.sum(2)?;
    Ok((per_class * weight)?.sum_all()?)
}

/// Lovász-softmax on `(N, H, W, D, K)` logits, one slice per (sample, z).
pub fn lovasz_softmax(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, h, w, d, k) = logits.dims5()?;
    let probs = occdrive_nn::softmax_last(logits)?;
    let probs = probs.permute((0, 3, 4, 1, 2))?.contiguous()?.reshape((n * d, k, h * w))?;
    let lab = labels.permute((0, 3, 1, 2))?.contiguous()?.flatten_all()?.to_vec1::<u32>()?;
    lovasz_softmax_slices(&probs, &lab)
}

/// Analytic KL of a diagonal Gaussian against N(0, I): per-plane mean over
/// elements, summed over the three planes.
pub fn kl_divergence(mean: &TriPlane, logvar: &TriPlane) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (mu, lv) in mean.planes().into_iter().zip(logvar.planes()) {
        let kl = ((mu.sqr()? + lv.exp()?)? - 1.0)?.sub(lv)?.affine(0.5, 0.0)?.mean_all()?;
        total = Some(match total {
            None => kl,
            Some(t) => (t + kl)?,
        });
    }
    Ok(total.expect("three planes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLossParts {
    pub ce: f64,
    pub lovasz: f64,
    pub kl: f64,
    pub total: f64,
}

pub struct VaeLoss {
    pub total: Tensor,
    pub ce: Tensor,
    pub lovasz: Tensor,
    pub kl: Tensor,
}

impl VaeLoss {
    pub fn parts(&self) -> Result<VaeLossParts> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(VaeLossParts {
            ce: f(&self.ce)?,
            lovasz: f(&self.lovasz)?,
            kl: f(&self.kl)?,
            total: f(&self.total)?,
        })
    }
}

/// Cross-entropy plus Lovász-softmax on decoded logits.
pub fn recon_loss(logits: &Tensor, labels: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((cross_entropy(logits, labels)?, lovasz_softmax(logits, labels)?))
}

/// `ce + lovasz + kl_weight * kl`.
pub fn vae_loss(labels: &Tensor, logits: &Tensor, z: &LatentTriPlane, kl_weight: f64) -> Result<VaeLoss> {
    let (ce, lovasz) = recon_loss(logits, labels)?;
    let kl = kl_divergence(&z.mean, &z.logvar)?;
    let total = ((&ce + &lovasz)? + (&kl * kl_weight)?)?;
    let v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(WorldError::NonFinite(format!("vae loss {v}")));
    }
    Ok(VaeLoss { total, ce, lovasz, kl })
}
