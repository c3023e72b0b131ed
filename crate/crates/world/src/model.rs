//! VAE + predictor glue: token layout conversion and autoregressive rollout.

use candle_core::Tensor;
use occdrive_core::{ControlSignal, OccupancyGrid, RigidTransform2D};
use occdrive_nn::Dropout;

use crate::error::{Result, WorldError};
use crate::predictor::{params_to_transform, HistoryBuffer, Predictor};
use crate::vae::{Sampling, TriPlane, TriPlaneVae};

/// `(N, h·(w+2d), C)` tokens of a tri-plane.
pub fn to_tokens(z: &TriPlane) -> Result<Tensor> {
    let g = z.concat_tokens()?;
    let (n, h, wd, c) = g.dims4()?;
    Ok(g.reshape((n, h * wd, c))?)
}

pub fn from_tokens(tokens: &Tensor, latent_dims: [usize; 3]) -> Result<TriPlane> {
    let [h, w, d] = latent_dims;
    let (n, t, c) = tokens.dims3()?;
    if t != h * (w + 2 * d) {
        return Err(WorldError::Shape(format!("{t} tokens for latent {latent_dims:?}")));
    }
    TriPlane::from_tokens(&tokens.reshape((n, h, w + 2 * d, c))?, w, d)
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// Predicted grids per step; outer index is the step, inner the batch row.
    pub grids: Vec<Vec<OccupancyGrid>>,
    /// Predicted tokens per step `(N, T, C)`.
    pub latents: Vec<Tensor>,
    /// Transform-head estimate per step and batch row.
    pub transforms: Vec<Vec<RigidTransform2D>>,
}

/// Autoregressive forecasting over a batch of equally long sequences.
///
/// `initial[b]` holds the past frames of sequence `b` (oldest first, padded to
/// `k + 1` by repeating the oldest); `controls[t][b]` drives step `t`.
pub fn rollout(
    vae: &TriPlaneVae,
    predictor: &Predictor,
    initial: &[Vec<&OccupancyGrid>],
    controls: &[Vec<&ControlSignal>],
) -> Result<Rollout> {
    if controls.is_empty() {
        return Err(WorldError::Empty("rollout needs at least one control".into()));
    }
    let batch = initial.len();
    if batch == 0 || initial.iter().any(|f| f.is_empty()) {
        return Err(WorldError::Empty("rollout needs at least one initial frame per sequence".into()));
    }
    let n_past = initial[0].len();
    if initial.iter().any(|f| f.len() != n_past) || controls.iter().any(|c| c.len() != batch) {
        return Err(WorldError::Shape("ragged rollout batch".into()));
    }
    let geom = initial[0][0];
    let off = Dropout::disabled();
    let mut buffer = HistoryBuffer::new(predictor.cfg.history);
    for t in 0..n_past {
        let frames: Vec<&OccupancyGrid> = initial.iter().map(|f| f[t]).collect();
        let z = vae.encode(&frames, Sampling::Mean, &off)?;
        buffer.push(to_tokens(&z.mean)?);
    }
    let mut out = Rollout {
        grids: Vec::new(),
        latents: Vec::new(),
        transforms: Vec::new(),
    };
    for step in controls {
        let (cur, hist) = buffer.split()?;
        let ctrl = predictor.control.embed_batch(step)?;
        let p = predictor.forward(&cur, &ctrl, &hist)?;
        let planes = from_tokens(&p.z_next, vae.latent_dims)?;
        out.grids.push(vae.decode_grids(&planes, geom.voxel_size, geom.origin)?);
        let rows = p.transform.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        out.transforms.push(rows.iter().map(|r| params_to_transform(r)).collect());
        out.latents.push(p.z_next.clone());
        buffer.push(p.z_next);
    }
    Ok(out)
}
