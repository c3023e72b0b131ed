//! Tri-plane occupancy VAE.
//!
//! One-hot voxels are downsampled by stride-2 kernel-2 3D convolutions
//! (space-to-depth followed by a channel projection), then each of the three
//! axis transformers collapses one spatial axis into a learnable summary token.
//! Decoding broadcasts the three planes back to a volume by elementwise
//! product, adds a factorized positional embedding and upsamples with
//! transposed convolutions (a projection followed by depth-to-space).

use candle_core::{DType, Device, Tensor};
use occdrive_core::OccupancyGrid;
use occdrive_nn::{Dropout, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, Scope};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub n_classes: usize,
    pub free_id: u8,
    /// Latent width C.
    pub channels: usize,
    /// Total downsampling factor; a power of two, one stride-2 stage per factor of 2.
    pub downsample: usize,
    pub heads: usize,
    /// Transformer layers per axis.
    pub layers: usize,
    pub dropout: f64,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            free_id: 0,
            channels: 64,
            downsample: 4,
            heads: 4,
            layers: 2,
            dropout: 0.5,
            kl_weight: 1e-6,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.n_classes < 2 || self.free_id as usize >= self.n_classes {
            return bad(format!("n_classes {} / free_id {}", self.n_classes, self.free_id));
        }
        if self.downsample < 2 || !self.downsample.is_power_of_two() {
            return bad(format!("downsample {} must be a power of two >= 2", self.downsample));
        }
        if self.channels < 2 || self.channels % 2 != 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} must be even and divisible by heads {}", self.channels, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.kl_weight < 0.0 {
            return bad(format!("dropout {} / kl_weight {}", self.dropout, self.kl_weight));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn latent_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let ds = self.downsample;
        if dims.iter().any(|&v| v == 0 || v % ds != 0) {
            return Err(WorldError::Shape(format!("grid {dims:?} not divisible by {ds}")));
        }
        Ok([dims[0] / ds, dims[1] / ds, dims[2] / ds])
    }
}

/// Scalar count of a tri-plane latent with plane sizes (h,w), (w,d), (h,d).
pub fn triplane_scalar_count(h: usize, w: usize, d: usize, c: usize) -> usize {
    (h * w + w * d + h * d) * c
}

/// Tri-plane scalars divided by those of an `h × w × bev_channels` BEV latent.
pub fn latent_size_ratio(h: usize, w: usize, d: usize, c: usize, bev_channels: usize) -> f64 {
    triplane_scalar_count(h, w, d, c) as f64 / (h * w * bev_channels) as f64
}

/// Three feature planes, each with a leading batch axis:
/// `xy: (N, h, w, C)`, `yz: (N, w, d, C)`, `xz: (N, h, d, C)`.
#[derive(Debug, Clone)]
pub struct TriPlane {
    pub xy: Tensor,
    pub yz: Tensor,
    pub xz: Tensor,
}

impl TriPlane {
    /// `(N, h, w, d, C)` implied by the planes, after checking consistency.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize, usize)> {
        let (n, h, w, c) = self.xy.dims4()?;
        let (n1, w1, d, c1) = self.yz.dims4()?;
        let (n2, h2, d2, c2) = self.xz.dims4()?;
        if (n1, w1, c1) != (n, w, c) || (n2, h2, d2, c2) != (n, h, d, c) {
            return Err(WorldError::Shape(format!(
                "planes {:?} {:?} {:?} are inconsistent",
                self.xy.dims(),
                self.yz.dims(),
                self.xz.dims()
            )));
        }
        Ok((n, h, w, d, c))
    }

    /// Concatenate into the token grid `(N, h, w + 2d, C)`; needs `h == w`.
    pub fn concat_tokens(&self) -> Result<Tensor> {
        let (_, h, w, _, _) = self.dims()?;
        if h != w {
            return Err(WorldError::Shape(format!("token layout needs h == w, got {h} and {w}")));
        }
        Ok(Tensor::cat(&[&self.xy, &self.yz, &self.xz], 2)?)
    }

    /// Inverse of [`TriPlane::concat_tokens`].
    pub fn from_tokens(tokens: &Tensor, w: usize, d: usize) -> Result<Self> {
        let (_, _, width, _) = tokens.dims4()?;
        if width != w + 2 * d {
            return Err(WorldError::Shape(format!("token width {width} != {w} + 2*{d}")));
        }
        Ok(Self {
            xy: tokens.narrow(2, 0, w)?,
            yz: tokens.narrow(2, w, d)?,
            xz: tokens.narrow(2, w + d, d)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            xy: self.xy.detach(),
            yz: self.yz.detach(),
            xz: self.xz.detach(),
        }
    }

    pub fn planes(&self) -> [&Tensor; 3] {
        [&self.xy, &self.yz, &self.xz]
    }

    /// Select batch rows.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            xy: self.xy.narrow(0, start, len)?,
            yz: self.yz.narrow(0, start, len)?,
            xz: self.xz.narrow(0, start, len)?,
        })
    }

    pub fn cat_batch(parts: &[TriPlane]) -> Result<Self> {
        let pick = |f: fn(&TriPlane) -> &Tensor| Tensor::cat(&parts.iter().map(f).collect::<Vec<_>>(), 0);
        Ok(Self {
            xy: pick(|p| &p.xy)?,
            yz: pick(|p| &p.yz)?,
            xz: pick(|p| &p.xz)?,
        })
    }
}

/// Posterior sample plus its Gaussian parameters.
#[derive(Debug, Clone)]
pub struct LatentTriPlane {
    pub sample: TriPlane,
    pub mean: TriPlane,
    pub logvar: TriPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Return the posterior mean (the zero-variance limit).
    Mean,
    /// Reparameterized sample with noise drawn from this seed.
    Seeded(u64),
}

/// `out[n,i,j,k,c] = xy[n,i,j,c] * yz[n,j,k,c] * xz[n,i,k,c]`.
pub fn compose_volume(z: &TriPlane) -> Result<Tensor> {
    let (n, h, w, d, c) = z.dims()?;
    let xy = z.xy.reshape((n, h, w, 1, c))?;
    let yz = z.yz.reshape((n, 1, w, d, c))?;
    let xz = z.xz.reshape((n, h, 1, d, c))?;
    Ok(xy.broadcast_mul(&yz)?.broadcast_mul(&xz)?)
}

/// `(N, H, W, D, C)` → `(N, H/2, W/2, D/2, 8C)`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, d, c) = x.dims5()?;
    if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
        return Err(WorldError::Shape(format!("space_to_depth on odd dims {:?}", x.dims())));
    }
    let x = x.reshape(vec![n, h / 2, 2, w / 2, 2, d / 2, 2, c])?;
    let x = x.permute(vec![0, 1, 3, 5, 2, 4, 6, 7])?.contiguous()?;
    Ok(x.reshape((n, h / 2, w / 2, d / 2, 8 * c))?)
}

/// `(N, h, w, d, 8C)` → `(N, 2h, 2w, 2d, C)`; inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, d, c8) = x.dims5()?;
    let c = c8 / 8;
    let x = x.reshape(vec![n, h, w, d, 2, 2, 2, c])?;
    let x = x.permute(vec![0, 1, 4, 2, 5, 3, 6, 7])?.contiguous()?;
    Ok(x.reshape((n, 2 * h, 2 * w, 2 * d, c))?)
}

/// One-hot encode a batch of equally shaped grids to `(N, H, W, D, K)`.
pub fn one_hot(grids: &[&OccupancyGrid], n_classes: usize, dtype: DType) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| WorldError::Empty("no grids to encode".into()))?;
    let [h, w, d] = first.dims();
    let mut data = vec![0f32; grids.len() * first.len() * n_classes];
    for (b, g) in grids.iter().enumerate() {
        g.same_shape(first)?;
        for (i, &l) in g.labels().iter().enumerate() {
            if l as usize >= n_classes {
                return Err(occdrive_core::OccError::InvalidLabel(format!("label {l} >= {n_classes}")).into());
            }
            data[(b * first.len() + i) * n_classes + l as usize] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (grids.len(), h, w, d, n_classes), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Labels of a batch of grids as a flat `u32` tensor `(N, H, W, D)`.
pub fn label_tensor(grids: &[&OccupancyGrid]) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| WorldError::Empty("no grids".into()))?;
    let [h, w, d] = first.dims();
    let mut data = Vec::with_capacity(grids.len() * first.len());
    for g in grids {
        g.same_shape(first)?;
        data.extend(g.labels().iter().map(|&l| l as u32));
    }
    Ok(Tensor::from_vec(data, (grids.len(), h, w, d), &Device::Cpu)?)
}

/// Pre-norm transformer block used inside the axis projections.
#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(s: &mut Scope<'_>, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut s.pp("ln1"), c)?,
            attn: MultiHeadAttention::new(&mut s.pp("attn"), c, heads)?,
            ln2: LayerNorm::new(&mut s.pp("ln2"), c)?,
            mlp: Mlp::new(&mut s.pp("mlp"), c, 2 * c, c)?,
        })
    }

    fn forward(&self, x: &Tensor, drop: &Dropout) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward_with(&h, drop)?)?)
    }
}

/// Collapses one axis of the volume: prepend a learnable token to each line
/// along the axis, self-attend, keep the token's output.
#[derive(Debug, Clone)]
pub struct AxisProjector {
    token: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    head: Linear,
}

impl AxisProjector {
    fn new(s: &mut Scope<'_>, cfg: &VaeConfig, axis_len: usize) -> Result<Self> {
        let c = cfg.channels;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut s.pp(format!("block{i}")), c, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token: s.get("token", &[c], Init::Normal(0.02))?,
            pos: s.get("pos", &[axis_len + 1, c], Init::Normal(0.02))?,
            blocks,
            ln: LayerNorm::new(&mut s.pp("ln"), c)?,
            head: Linear::new(&mut s.pp("posterior"), c, 2 * c)?,
        })
    }

    /// `lines: (B, L, C)` → posterior `(mean, logvar)`, each `(B, C)`.
    fn forward(&self, lines: &Tensor, drop: &Dropout) -> Result<(Tensor, Tensor)> {
        let (b, l, c) = lines.dims3()?;
        if l + 1 != self.pos.dim(0)? {
            return Err(WorldError::Shape(format!("axis length {l}, projector built for {}", self.pos.dim(0)? - 1)));
        }
        let tok = self.token.reshape((1, 1, c))?.broadcast_as((b, 1, c))?;
        let mut x = Tensor::cat(&[&tok, lines], 1)?.broadcast_add(&self.pos.unsqueeze(0)?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, drop)?;
        }
        let out = self.ln.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        let stats = self.head.forward(&out)?;
        let mean = stats.narrow(1, 0, c)?;
        let logvar = stats.narrow(1, c, c)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mean, logvar))
    }
}

#[derive(Debug, Clone)]
pub struct TriPlaneVae {
    pub cfg: VaeConfig,
    pub grid_dims: [usize; 3],
    pub latent_dims: [usize; 3],
    encoder: Vec<Linear>,
    proj_xy: AxisProjector,
    proj_yz: AxisProjector,
    proj_xz: AxisProjector,
    pe_x: Tensor,
    pe_y: Tensor,
    pe_z: Tensor,
    decoder: Vec<Linear>,
}

impl TriPlaneVae {
    pub fn new(store: &mut ParamStore, cfg: &VaeConfig, grid_dims: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let latent_dims = cfg.latent_dims(grid_dims)?;
        let [h, w, d] = latent_dims;
        let c = cfg.channels;
        let stages = cfg.stages();
        let width = |i: usize| if i + 1 == stages { c } else { c / 2 };
        let mut root = store.root();
        let mut encoder = Vec::new();
        let mut cin = cfg.n_classes;
        for i in 0..stages {
            encoder.push(Linear::new(&mut root.pp(format!("enc.down{i}")), 8 * cin, width(i))?);
            cin = width(i);
        }
        let proj_xy = AxisProjector::new(&mut root.pp("proj_xy"), cfg, d)?;
        let proj_yz = AxisProjector::new(&mut root.pp("proj_yz"), cfg, h)?;
        let proj_xz = AxisProjector::new(&mut root.pp("proj_xz"), cfg, w)?;
        let pe_x = root.get("pe.x", &[h, c], Init::Normal(0.02))?;
        let pe_y = root.get("pe.y", &[w, c], Init::Normal(0.02))?;
        let pe_z = root.get("pe.z", &[d, c], Init::Normal(0.02))?;
        let mut decoder = Vec::new();
        let mut cin = c;
        for i in 0..stages {
            let cout = if i + 1 == stages { cfg.n_classes } else { c / 2 };
            decoder.push(Linear::new(&mut root.pp(format!("dec.up{i}")), cin, 8 * cout)?);
            cin = cout;
        }
        Ok(Self {
            cfg: cfg.clone(),
            grid_dims,
            latent_dims,
            encoder,
            proj_xy,
            proj_yz,
            proj_xz,
            pe_x,
            pe_y,
            pe_z,
            decoder,
        })
    }

    /// Downsampled volume feature `(N, h, w, d, C)` from one-hot input.
    pub fn features(&self, onehot: &Tensor) -> Result<Tensor> {
        let (_, hh, ww, dd, k) = onehot.dims5()?;
        if [hh, ww, dd] != self.grid_dims || k != self.cfg.n_classes {
            return Err(WorldError::Shape(format!(
                "input {:?} vs model grid {:?} with {} classes",
                onehot.dims(),
                self.grid_dims,
                self.cfg.n_classes
            )));
        }
        let mut x = onehot.clone();
        for (i, lin) in self.encoder.iter().enumerate() {
            x = lin.forward(&space_to_depth(&x)?)?;
            if i + 1 < self.encoder.len() {
                x = x.gelu()?;
            }
        }
        Ok(x)
    }

    pub fn encode_onehot(&self, onehot: &Tensor, sampling: Sampling, drop: &Dropout) -> Result<LatentTriPlane> {
        let s = self.features(onehot)?;
        let (n, h, w, d, c) = s.dims5()?;
        let (m_xy, l_xy) = self.proj_xy.forward(&s.reshape((n * h * w, d, c))?, drop)?;
        let yz_lines = s.permute((0, 2, 3, 1, 4))?.contiguous()?.reshape((n * w * d, h, c))?;
        let (m_yz, l_yz) = self.proj_yz.forward(&yz_lines, drop)?;
        let xz_lines = s.permute((0, 1, 3, 2, 4))?.contiguous()?.reshape((n * h * d, w, c))?;
        let (m_xz, l_xz) = self.proj_xz.forward(&xz_lines, drop)?;
        let mean = TriPlane {
            xy: m_xy.reshape((n, h, w, c))?,
            yz: m_yz.reshape((n, w, d, c))?,
            xz: m_xz.reshape((n, h, d, c))?,
        };
        let logvar = TriPlane {
            xy: l_xy.reshape((n, h, w, c))?,
            yz: l_yz.reshape((n, w, d, c))?,
            xz: l_xz.reshape((n, h, d, c))?,
        };
        let sample = match sampling {
            Sampling::Mean => mean.clone(),
            Sampling::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut draw = |mu: &Tensor, lv: &Tensor| -> Result<Tensor> {
                    let eps: Vec<f64> = (0..mu.elem_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let eps = Tensor::from_vec(eps, mu.shape(), mu.device())?.to_dtype(mu.dtype())?;
                    Ok((mu + (lv * 0.5)?.exp()?.mul(&eps)?)?)
                };
                TriPlane {
                    xy: draw(&mean.xy, &logvar.xy)?,
                    yz: draw(&mean.yz, &logvar.yz)?,
                    xz: draw(&mean.xz, &logvar.xz)?,
                }
            }
        };
        Ok(LatentTriPlane { sample, mean, logvar })
    }

    pub fn encode(&self, grids: &[&OccupancyGrid], sampling: Sampling, drop: &Dropout) -> Result<LatentTriPlane> {
        for g in grids {
            if g.dims() != self.grid_dims {
                return Err(occdrive_core::OccError::ShapeMismatch(g.dims(), self.grid_dims).into());
            }
        }
        let dtype = self.pe_x.dtype();
        self.encode_onehot(&one_hot(grids, self.cfg.n_classes, dtype)?, sampling, drop)
    }

    /// `PE(x, y, z) = e_x + e_y + e_z`, shape `(h, w, d, C)`.
    pub fn positional(&self) -> Result<Tensor> {
        let [h, w, d] = self.latent_dims;
        let c = self.cfg.channels;
        let ex = self.pe_x.reshape((h, 1, 1, c))?;
        let ey = self.pe_y.reshape((1, w, 1, c))?;
        let ez = self.pe_z.reshape((1, 1, d, c))?;
        Ok(ex.broadcast_add(&ey)?.broadcast_add(&ez)?)
    }

    /// Class logits `(N, H, W, D, K)`.
    pub fn decode(&self, z: &TriPlane) -> Result<Tensor> {
        let (_, h, w, d, c) = z.dims()?;
        if [h, w, d] != self.latent_dims || c != self.cfg.channels {
            return Err(WorldError::Shape(format!(
                "latent ({h},{w},{d},{c}) vs model {:?}x{}",
                self.latent_dims, self.cfg.channels
            )));
        }
        let mut x = compose_volume(z)?.broadcast_add(&self.positional()?.unsqueeze(0)?)?;
        for (i, lin) in self.decoder.iter().enumerate() {
            x = depth_to_space(&lin.forward(&x)?)?;
            if i + 1 < self.decoder.len() {
                x = x.gelu()?;
            }
        }
        Ok(x)
    }

    /// Argmax of decoded logits as grids with the given geometry.
    pub fn decode_grids(&self, z: &TriPlane, voxel_size: f64, origin: [f64; 3]) -> Result<Vec<OccupancyGrid>> {
        logits_to_grids(&self.decode(z)?, voxel_size, origin)
    }

    pub fn reconstruct(&self, grids: &[&OccupancyGrid]) -> Result<Vec<OccupancyGrid>> {
        let first = grids.first().ok_or_else(|| WorldError::Empty("no grids".into()))?;
        let z = self.encode(grids, Sampling::Mean, &Dropout::disabled())?;
        self.decode_grids(&z.mean, first.voxel_size, first.origin)
    }
}

pub fn logits_to_grids(logits: &Tensor, voxel_size: f64, origin: [f64; 3]) -> Result<Vec<OccupancyGrid>> {
    let (n, h, w, d, _) = logits.dims5()?;
    let labels = logits.argmax(4)?.flatten_all()?.to_vec1::<u32>()?;
    let per = h * w * d;
    (0..n)
        .map(|b| {
            let l = labels[b * per..(b + 1) * per].iter().map(|&v| v as u8).collect();
            Ok(OccupancyGrid::new([h, w, d], l, voxel_size, origin)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_plane(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> (Tensor, Vec<f64>) {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (Tensor::from_vec(v.clone(), dims, &Device::Cpu).unwrap(), v)
    }

    #[test]
    fn compose_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, h, w, d, c) = (2, 3, 3, 2, 2);
        let (xy, a) = rand_plane(&mut rng, (n, h, w, c));
        let (yz, b) = rand_plane(&mut rng, (n, w, d, c));
        let (xz, e) = rand_plane(&mut rng, (n, h, d, c));
        let out = compose_volume(&TriPlane { xy, yz, xz }).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut idx = 0;
        for s in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        for ch in 0..c {
                            let want = a[((s * h + i) * w + j) * c + ch]
                                * b[((s * w + j) * d + k) * c + ch]
                                * e[((s * h + i) * d + k) * c + ch];
                            assert_eq!(out[idx], want);
                            idx += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn compose_identity_and_absorbing() {
        let ones = |s: (usize, usize, usize, usize)| Tensor::ones(s, DType::F64, &Device::Cpu).unwrap();
        let z = TriPlane { xy: ones((1, 2, 2, 3)), yz: ones((1, 2, 4, 3)), xz: ones((1, 2, 4, 3)) };
        let v = compose_volume(&z).unwrap();
        assert_eq!(v.dims(), &[1, 2, 2, 4, 3]);
        assert_eq!(v.sum_all().unwrap().to_scalar::<f64>().unwrap(), 48.0);
        let z0 = TriPlane { yz: z.yz.zeros_like().unwrap(), ..z };
        assert_eq!(compose_volume(&z0).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn depth_space_round_trip() {
        let x = Tensor::arange(0f64, 2.0 * 4.0 * 4.0 * 2.0 * 3.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 4, 4, 2, 3))
            .unwrap();
        let y = space_to_depth(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 2, 1, 24]);
        // channel block (a,b,e) of cell (i,j,k) holds voxel (2i+a, 2j+b, 2k+e)
        let v = x.get(1).unwrap().get(3).unwrap().get(0).unwrap().get(1).unwrap().to_vec1::<f64>().unwrap();
        let cell = y.get(1).unwrap().get(1).unwrap().get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        let blk = (1 * 2 + 0) * 2 + 1;
        assert_eq!(&cell[blk * 3..blk * 3 + 3], v.as_slice());
        let back = depth_to_space(&y).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f64>().unwrap(), x.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn paper_dims_latent_sizes() {
        let cfg = VaeConfig { channels: 64, ..Default::default() };
        let [h, w, d] = cfg.latent_dims([200, 200, 16]).unwrap();
        assert_eq!((h, w, d), (50, 50, 4));
        assert_eq!(h * (w + 2 * d) * 64, 185_600);
        assert_eq!(triplane_scalar_count(h, w, d, 64), 185_600);
        assert_eq!(latent_size_ratio(h, w, d, 64, 128), 0.58);
    }

    #[test]
    fn degenerate_single_token_planes() {
        let cfg = VaeConfig { channels: 2, heads: 1, ..Default::default() };
        let mut store = ParamStore::new(0, DType::F64);
        let vae = TriPlaneVae::new(&mut store, &cfg, [4, 4, 4]).unwrap();
        let g = OccupancyGrid::filled([4, 4, 4], 1, 1.0, [0.0; 3]).unwrap();
        let z = vae.encode(&[&g], Sampling::Mean, &Dropout::disabled()).unwrap();
        for p in z.sample.planes() {
            assert_eq!(p.dims(), &[1, 1, 1, 2]);
        }
        assert_eq!(z.sample.concat_tokens().unwrap().dims(), &[1, 1, 3, 2]);
    }
}
