//! Toy paired data: colorized semantic renders with a per-clip color tint.
//!
//! Views are overlapping crops of one wide front camera, so neighbouring
//! views see the same scene content over half their width.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use occdrive_core::{generate_synthetic_sequence, Camera, LabelPalette, SceneGenConfig};
use occdrive_render::{render_sequence, ConditionStack, SemanticMap, BACKGROUND, DEFAULT_ALPHA};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VideoError};
use crate::model::{condition_one_hot, VideoConfig};

pub const VIDEO_MANIFEST: &str = "video_manifest";
pub const VIDEO_BLOB: &str = "video.bin";
const SKY: [u8; 3] = [150, 190, 235];
const CAMERA_HEIGHT: f64 = 1.8;
const CAMERA_PITCH: f64 = 8.0 * std::f64::consts::PI / 180.0;

/// A clip `(n, t, c, H, W)` with its labels `(n, t, H, W)`.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub video: Tensor,
    pub labels: Vec<u8>,
    pub tint: [f64; 3],
}

impl VideoSample {
    pub fn condition(&self, cfg: &VideoConfig, dtype: DType) -> Result<Tensor> {
        let [n, t, _, h, w] = cfg.video_shape();
        Ok(condition_one_hot(&self.labels, [1, n, t, h, w], cfg.n_classes, dtype)?.squeeze(0)?)
    }
}

/// Labels of a condition stack flattened `(n, t, H, W)`.
pub fn stack_labels(stack: &ConditionStack) -> Vec<u8> {
    stack.maps.iter().flatten().flat_map(|m| m.labels.iter().copied()).collect()
}

pub fn check_stack(stack: &ConditionStack, cfg: &VideoConfig) -> Result<()> {
    stack.validate()?;
    if stack.views() != cfg.views || stack.frames() != cfg.frames || stack.size() != (cfg.height, cfg.width) {
        return Err(VideoError::Shape(format!(
            "condition stack is {}x{} maps of {:?}, model wants {}x{} of {:?}",
            stack.views(),
            stack.frames(),
            stack.size(),
            cfg.views,
            cfg.frames,
            (cfg.height, cfg.width)
        )));
    }
    if stack.palette.n_classes != cfg.n_classes {
        return Err(VideoError::Shape(format!(
            "palette has {} classes, model wants {}",
            stack.palette.n_classes,
            cfg.n_classes
        )));
    }
    Ok(())
}

/// Pixel values in `[-1, 1]` per label, background sky, plus `tint`.
pub fn colorize(labels: &[u8], n: usize, t: usize, h: usize, w: usize, palette: &LabelPalette, tint: [f64; 3]) -> Result<Tensor> {
    if labels.len() != n * t * h * w {
        return Err(VideoError::Shape(format!("{} labels for {n}x{t}x{h}x{w}", labels.len())));
    }
    let hw = h * w;
    let mut data = vec![0f32; n * t * 3 * hw];
    for (frame, chunk) in labels.chunks(hw).enumerate() {
        for (i, &l) in chunk.iter().enumerate() {
            let rgb = if l == BACKGROUND { SKY } else { palette.colors[l as usize] };
            for ch in 0..3 {
                data[(frame * 3 + ch) * hw + i] = (rgb[ch] as f64 / 127.5 - 1.0 + tint[ch]) as f32;
            }
        }
    }
    Ok(Tensor::from_vec(data, (n, t, 3, h, w), &Device::Cpu)?)
}

/// Wide front camera whose width covers `views` crops offset by half a view.
pub fn panorama_camera(cfg: &VideoConfig) -> Camera {
    let pano_w = cfg.width + (cfg.views - 1) * cfg.width / 2;
    // each crop keeps a 90 degree horizontal field of view
    let f = cfg.width as f64 / 2.0;
    let fov = 2.0 * (pano_w as f64 / 2.0 / f).atan();
    Camera::looking([0.0, 0.0, CAMERA_HEIGHT], 0.0, CAMERA_PITCH, fov, pano_w, cfg.height)
}

fn crop(map: &SemanticMap, x0: usize, w: usize) -> SemanticMap {
    let labels = (0..map.height)
        .flat_map(|r| map.labels[r * map.width + x0..r * map.width + x0 + w].iter().copied())
        .collect();
    SemanticMap {
        height: map.height,
        width: w,
        labels,
    }
}

/// Overlapping view crops of one occupancy sequence.
pub fn overlapping_views(frames: &[occdrive_core::OccupancyGrid], cfg: &VideoConfig, palette: &LabelPalette) -> Result<ConditionStack> {
    if frames.len() != cfg.frames {
        return Err(VideoError::Shape(format!("{} occupancy frames, model wants {}", frames.len(), cfg.frames)));
    }
    let cam = panorama_camera(cfg);
    let pano = render_sequence(frames, std::slice::from_ref(&cam), palette, DEFAULT_ALPHA)?;
    let per_frame = pano
        .iter()
        .map(|f| (0..cfg.views).map(|v| crop(&f[0], v * cfg.width / 2, cfg.width)).collect())
        .collect();
    Ok(ConditionStack::from_frames(per_frame, palette)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDataConfig {
    pub samples: usize,
    /// Half-width of the uniform per-clip tint.
    pub tint: f64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self { samples: 16, tint: 0.5 }
    }
}

pub fn build_toy_dataset(
    gen: &SceneGenConfig,
    cfg: &VideoConfig,
    data: &ToyDataConfig,
    palette: &LabelPalette,
    seed: u64,
) -> Result<Vec<VideoSample>> {
    cfg.validate()?;
    if cfg.channels != 3 {
        return Err(VideoError::Config(format!("toy clips are RGB, model has {} channels", cfg.channels)));
    }
    let gen = SceneGenConfig {
        seq_len: cfg.frames.max(2),
        ..gen.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_71de);
    (0..data.samples)
        .map(|i| {
            let seq = generate_synthetic_sequence(&gen, seed.wrapping_add(i as u64))?;
            let stack = overlapping_views(&seq.frames[..cfg.frames], cfg, palette)?;
            sample_from_stack(&stack, cfg, palette, data.tint, &mut rng)
        })
        .collect()
}

pub fn sample_from_stack(
    stack: &ConditionStack,
    cfg: &VideoConfig,
    palette: &LabelPalette,
    tint: f64,
    rng: &mut impl Rng,
) -> Result<VideoSample> {
    check_stack(stack, cfg)?;
    let tint = if tint > 0.0 {
        [(); 3].map(|_| rng.gen_range(-tint..tint))
    } else {
        [0.0; 3]
    };
    let labels = stack_labels(stack);
    let video = colorize(&labels, cfg.views, cfg.frames, cfg.height, cfg.width, palette, tint)?;
    Ok(VideoSample { video, labels, tint })
}

/// Mean absolute difference between neighbouring views over their shared
/// half-width; `video` is `(n, t, c, H, W)`.
pub fn overlap_mae(video: &Tensor) -> Result<f64> {
    let (n, _, _, _, w) = video.dims5()?;
    if n < 2 {
        return Err(VideoError::Shape("overlap needs at least two views".into()));
    }
    let half = w / 2;
    let mut total = 0.0;
    for v in 0..n - 1 {
        let right = video.narrow(0, v, 1)?.narrow(4, w - half, half)?;
        let left = video.narrow(0, v + 1, 1)?.narrow(4, 0, half)?;
        total += (right - left)?.abs()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / (n - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    pub version: u32,
    /// `(n, t, c, H, W)`.
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Raw tensor file (manifest + little-endian f32 blob) plus one PNG per frame
/// with the views side by side.
pub fn write_video(video: &Tensor, dir: &Path) -> Result<()> {
    let (n, t, c, h, w) = video.dims5()?;
    if c != 3 && c != 1 {
        return Err(VideoError::Shape(format!("{c} channels cannot be written as PNG")));
    }
    fs::create_dir_all(dir)?;
    let data = video.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(VideoError::NonFinite { what: "video".into(), step: 0 });
    }
    let manifest = VideoManifest {
        version: 1,
        shape: vec![n, t, c, h, w],
        dtype: "f32le".into(),
    };
    fs::write(dir.join(VIDEO_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(VIDEO_BLOB), data.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>())?;
    let to_u8 = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    for f in 0..t {
        let mut img = image::RgbImage::new((n * w) as u32, h as u32);
        for v in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let at = |ch: usize| data[(((v * t + f) * c + ch.min(c - 1)) * h + y) * w + x];
                    img.put_pixel((v * w + x) as u32, y as u32, image::Rgb([to_u8(at(0)), to_u8(at(1)), to_u8(at(2))]));
                }
            }
        }
        img.save(dir.join(format!("frame{f}.png")))?;
    }
    Ok(())
}

pub fn read_video(dir: &Path) -> Result<Tensor> {
    let manifest: VideoManifest = serde_json::from_str(&fs::read_to_string(dir.join(VIDEO_MANIFEST))?)?;
    if manifest.dtype != "f32le" || manifest.shape.len() != 5 {
        return Err(VideoError::Shape(format!("unsupported video {:?} {}", manifest.shape, manifest.dtype)));
    }
    let bytes = fs::read(dir.join(VIDEO_BLOB))?;
    let count: usize = manifest.shape.iter().product();
    if bytes.len() != 4 * count {
        return Err(VideoError::Shape(format!("blob is {} bytes, manifest expects {}", bytes.len(), 4 * count)));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::from_vec(data, manifest.shape, &Device::Cpu)?)
}
