//! Sequence directory format.
//!
//! `manifest` is UTF-8 JSON describing the sequence; `frames.bin` holds one
//! block per frame: the 8-byte magic `OCCGRIDv`, three little-endian `u32`
//! (H, W, D), then `H*W*D` `u8` labels in x-major, y, z order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{Command, ControlSignal};
use crate::error::{OccError, Result};
use crate::geometry::{Camera, RigidTransform2D};
use crate::grid::{LabelPalette, OccupancyGrid};
use crate::sequence::SceneSequence;

pub const GRID_MAGIC: &[u8; 8] = b"OCCGRIDv";
pub const MANIFEST_FILE: &str = "manifest";
pub const FRAMES_FILE: &str = "frames.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub version: u32,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub n_classes: usize,
    pub free_id: u8,
    pub fps: f64,
    pub frame_count: usize,
    pub voxel_size: f64,
    #[serde(default)]
    pub origin: Option<[f64; 3]>,
    pub ego_poses: Vec<[f64; 3]>,
    pub controls: Vec<ManifestControl>,
    pub cameras: Vec<ManifestCamera>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestControl {
    pub command: Command,
    pub waypoints: Vec<[f64; 2]>,
    pub gt_transform: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCamera {
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub extrinsic: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

fn pose_to_array(t: &RigidTransform2D) -> [f64; 3] {
    [t.theta, t.tx, t.ty]
}

fn pose_from_array(a: [f64; 3]) -> RigidTransform2D {
    RigidTransform2D::new(a[0], a[1], a[2])
}

impl ManifestCamera {
    fn from_camera(c: &Camera) -> Self {
        Self {
            k: c.k.iter().flatten().copied().collect(),
            extrinsic: c.extrinsic.iter().flatten().copied().collect(),
            width: c.width,
            height: c.height,
        }
    }

    fn to_camera(&self) -> Result<Camera> {
        if self.k.len() != 9 || self.extrinsic.len() != 16 {
            return Err(OccError::Format(format!(
                "camera needs 9 intrinsic and 16 extrinsic values, got {} and {}",
                self.k.len(),
                self.extrinsic.len()
            )));
        }
        let mut k = [[0.0; 3]; 3];
        let mut extrinsic = [[0.0; 4]; 4];
        for r in 0..3 {
            k[r].copy_from_slice(&self.k[r * 3..r * 3 + 3]);
        }
        for r in 0..4 {
            extrinsic[r].copy_from_slice(&self.extrinsic[r * 4..r * 4 + 4]);
        }
        Ok(Camera {
            k,
            extrinsic,
            width: self.width,
            height: self.height,
        })
    }
}

pub fn encode_grid_block(grid: &OccupancyGrid, out: &mut Vec<u8>) {
    out.extend_from_slice(GRID_MAGIC);
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(grid.labels());
}

pub fn save_sequence(seq: &SceneSequence, palette: &LabelPalette, dir: &Path) -> Result<()> {
    seq.validate(palette)?;
    let first = &seq.frames[0];
    let [h, w, d] = first.dims();
    let manifest = SequenceManifest {
        version: FORMAT_VERSION,
        h,
        w,
        d,
        n_classes: palette.n_classes,
        free_id: palette.free_id,
        fps: seq.fps,
        frame_count: seq.frames.len(),
        voxel_size: first.voxel_size,
        origin: Some(first.origin),
        ego_poses: seq.ego_poses.iter().map(pose_to_array).collect(),
        controls: seq
            .controls
            .iter()
            .map(|c| ManifestControl {
                command: c.command,
                waypoints: c.waypoints.clone(),
                gt_transform: pose_to_array(&c.gt_transform),
            })
            .collect(),
        cameras: seq.camera_rig.iter().map(ManifestCamera::from_camera).collect(),
    };
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| OccError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    let mut blob = Vec::with_capacity(seq.frames.len() * (20 + first.len()));
    for f in &seq.frames {
        encode_grid_block(f, &mut blob);
    }
    fs::write(dir.join(FRAMES_FILE), blob)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<SequenceManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: SequenceManifest =
        serde_json::from_str(&text).map_err(|e| OccError::Format(format!("bad manifest: {e}")))?;
    if m.version != FORMAT_VERSION {
        return Err(OccError::Format(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Parse `frames.bin` into blocks of `h*w*d` labels, checking magic and dims.
pub fn decode_grid_blocks(bytes: &[u8], dims: [usize; 3]) -> Result<Vec<Vec<u8>>> {
    let n = dims[0] * dims[1] * dims[2];
    let block = 20 + n;
    let mut out = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        let rest = &bytes[off..];
        if rest.len() < 20 {
            return Err(OccError::Truncated(format!("frame header at byte {off} is cut short")));
        }
        if &rest[..8] != GRID_MAGIC {
            return Err(OccError::Format(format!("bad frame magic at byte {off}")));
        }
        let read_u32 = |i: usize| u32::from_le_bytes(rest[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let got = [read_u32(0), read_u32(1), read_u32(2)];
        if got != dims {
            return Err(OccError::DimensionMismatch(format!(
                "frame {} has dims {got:?}, manifest says {dims:?}",
                out.len()
            )));
        }
        if rest.len() < block {
            return Err(OccError::Truncated(format!(
                "frame {} needs {block} bytes, {} remain",
                out.len(),
                rest.len()
            )));
        }
        out.push(rest[20..block].to_vec());
        off += block;
    }
    Ok(out)
}

pub fn load_sequence(dir: &Path) -> Result<SceneSequence> {
    let m = read_manifest(dir)?;
    let dims = [m.h, m.w, m.d];
    if dims.iter().any(|&d| d == 0) {
        return Err(OccError::DimensionMismatch(format!("manifest dims {dims:?} contain zero")));
    }
    if m.free_id as usize >= m.n_classes {
        return Err(OccError::Format(format!("free_id {} >= n_classes {}", m.free_id, m.n_classes)));
    }
    let bytes = fs::read(dir.join(FRAMES_FILE))?;
    let blocks = decode_grid_blocks(&bytes, dims)?;
    if blocks.len() != m.frame_count {
        return Err(OccError::Consistency(format!(
            "manifest lists {} frames, blob holds {}",
            m.frame_count,
            blocks.len()
        )));
    }
    if m.ego_poses.len() != m.frame_count || m.controls.len() + 1 != m.frame_count {
        return Err(OccError::Consistency(format!(
            "{} frames but {} poses and {} controls",
            m.frame_count,
            m.ego_poses.len(),
            m.controls.len()
        )));
    }
    let origin = m
        .origin
        .unwrap_or([-(m.h as f64) * m.voxel_size / 2.0, -(m.w as f64) * m.voxel_size / 2.0, 0.0]);
    let mut frames = Vec::with_capacity(blocks.len());
    for labels in blocks {
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= m.n_classes) {
            return Err(OccError::InvalidLabel(format!("label {bad} >= n_classes {}", m.n_classes)));
        }
        frames.push(OccupancyGrid::new(dims, labels, m.voxel_size, origin)?);
    }
    let controls = m
        .controls
        .iter()
        .map(|c| ControlSignal {
            command: c.command,
            waypoints: c.waypoints.clone(),
            gt_transform: pose_from_array(c.gt_transform),
        })
        .collect();
    let camera_rig = m.cameras.iter().map(|c| c.to_camera()).collect::<Result<Vec<_>>>()?;
    Ok(SceneSequence {
        frames,
        controls,
        ego_poses: m.ego_poses.iter().copied().map(pose_from_array).collect(),
        camera_rig,
        fps: m.fps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_sequence, SceneGenConfig};

    fn saved() -> (tempfile::TempDir, SceneSequence) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneGenConfig {
            seq_len: 4,
            ..SceneGenConfig::default()
        };
        let seq = generate_synthetic_sequence(&cfg, 11).unwrap();
        save_sequence(&seq, &LabelPalette::driving(), dir.path()).unwrap();
        (dir, seq)
    }

    #[test]
    fn round_trip_is_lossless() {
        let (dir, seq) = saved();
        assert_eq!(load_sequence(dir.path()).unwrap(), seq);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let (dir, _) = saved();
        let p = dir.path().join(FRAMES_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(OccError::Format(_))));
    }

    #[test]
    fn truncated_blob_and_count_mismatch_are_distinct() {
        let (dir, _) = saved();
        let p = dir.path().join(FRAMES_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(OccError::Truncated(_))));

        let block = bytes.len() / 4;
        fs::write(&p, &bytes[..3 * block]).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(OccError::Consistency(_))));
    }

    #[test]
    fn wrong_block_dims_and_bad_manifest() {
        let (dir, _) = saved();
        let p = dir.path().join(FRAMES_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[8] = 16;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(OccError::DimensionMismatch(_))));

        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(OccError::Format(_))));
    }
}
