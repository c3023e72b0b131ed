//! Condition-stack directory format.
//!
//! `cond_manifest` is JSON listing views, frames, map size and palette; each
//! map is `view{v}_frame{t}.bin`: the 8-byte magic `SEMMAPv1`, two
//! little-endian `u32` (h, w), then `h*w` `u8` labels row-major.

use std::fs;
use std::path::Path;

use occdrive_core::LabelPalette;
use serde::{Deserialize, Serialize};

use crate::error::{RenderError, Result};
use crate::splat::{SemanticMap, BACKGROUND};

pub const MAP_MAGIC: &[u8; 8] = b"SEMMAPv1";
pub const COND_MANIFEST: &str = "cond_manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondManifest {
    pub version: u32,
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: u8,
    pub palette: LabelPalette,
}

/// Maps indexed `[view][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStack {
    pub palette: LabelPalette,
    pub maps: Vec<Vec<SemanticMap>>,
}

impl ConditionStack {
    /// From renders indexed `[frame][view]`.
    pub fn from_frames(per_frame: Vec<Vec<SemanticMap>>, palette: &LabelPalette) -> Result<Self> {
        let views = per_frame.first().map_or(0, |f| f.len());
        if per_frame.iter().any(|f| f.len() != views) {
            return Err(RenderError::Format("frames have different view counts".into()));
        }
        let mut maps: Vec<Vec<SemanticMap>> = vec![Vec::with_capacity(per_frame.len()); views];
        for frame in per_frame {
            for (v, m) in frame.into_iter().enumerate() {
                maps[v].push(m);
            }
        }
        let stack = Self {
            palette: palette.clone(),
            maps,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn views(&self) -> usize {
        self.maps.len()
    }

    pub fn frames(&self) -> usize {
        self.maps.first().map_or(0, |v| v.len())
    }

    pub fn size(&self) -> (usize, usize) {
        self.maps
            .first()
            .and_then(|v| v.first())
            .map_or((0, 0), |m| (m.height, m.width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.views() == 0 || self.frames() == 0 {
            return Err(RenderError::Format("empty condition stack".into()));
        }
        let size = self.size();
        for view in &self.maps {
            if view.len() != self.frames() {
                return Err(RenderError::Format("views have different frame counts".into()));
            }
            for m in view {
                if (m.height, m.width) != size {
                    return Err(RenderError::Format("maps have different sizes".into()));
                }
                m.validate(&self.palette)?;
            }
        }
        Ok(())
    }
}

fn map_file(v: usize, t: usize) -> String {
    format!("view{v}_frame{t}.bin")
}

pub fn encode_map(map: &SemanticMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + map.labels.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&map.labels);
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<SemanticMap> {
    if bytes.len() < 16 || &bytes[..8] != MAP_MAGIC {
        return Err(RenderError::Format("missing SEMMAPv1 header".into()));
    }
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + height * width {
        return Err(RenderError::Format(format!(
            "map body is {} bytes, header says {height}x{width}",
            bytes.len() - 16
        )));
    }
    Ok(SemanticMap {
        height,
        width,
        labels: bytes[16..].to_vec(),
    })
}

pub fn write_condition_stack(stack: &ConditionStack, dir: &Path) -> Result<()> {
    stack.validate()?;
    fs::create_dir_all(dir)?;
    let (height, width) = stack.size();
    let manifest = CondManifest {
        version: 1,
        views: stack.views(),
        frames: stack.frames(),
        height,
        width,
        background: BACKGROUND,
        palette: stack.palette.clone(),
    };
    fs::write(dir.join(COND_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    for (v, view) in stack.maps.iter().enumerate() {
        for (t, m) in view.iter().enumerate() {
            fs::write(dir.join(map_file(v, t)), encode_map(m))?;
        }
    }
    Ok(())
}

pub fn read_condition_stack(dir: &Path) -> Result<ConditionStack> {
    let manifest: CondManifest = serde_json::from_str(&fs::read_to_string(dir.join(COND_MANIFEST))?)?;
    if manifest.background != BACKGROUND {
        return Err(RenderError::Format(format!("background id {} unsupported", manifest.background)));
    }
    let mut maps = Vec::with_capacity(manifest.views);
    for v in 0..manifest.views {
        let mut view = Vec::with_capacity(manifest.frames);
        for t in 0..manifest.frames {
            let m = decode_map(&fs::read(dir.join(map_file(v, t)))?)?;
            if (m.height, m.width) != (manifest.height, manifest.width) {
                return Err(RenderError::Format(format!("{} has the wrong size", map_file(v, t))));
            }
            view.push(m);
        }
        maps.push(view);
    }
    let stack = ConditionStack {
        palette: manifest.palette,
        maps,
    };
    stack.validate()?;
    Ok(stack)
}

/// Palette-colored PNG; background is white.
pub fn write_png(map: &SemanticMap, palette: &LabelPalette, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let l = map.labels[i];
        *px = image::Rgb(if l == BACKGROUND { [255, 255, 255] } else { palette.colors[l as usize] });
    }
    img.save(path)?;
    Ok(())
}
