use occdrive_core::{Camera, LabelPalette, OccupancyGrid};
use serde::{Deserialize, Serialize};

use crate::error::{RenderError, Result};

/// Label written where no primitive (or voxel) is hit.
pub const BACKGROUND: u8 = 255;

/// Stop compositing once transmittance falls below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-3;

/// Opacity used for conditioning renders.
pub const DEFAULT_ALPHA: f64 = 0.95;

/// Points closer than this along the optical axis are culled.
const NEAR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub center: [f64; 3],
    pub class_id: u8,
    pub opacity: f64,
    pub radius: f64,
}

/// Row-major `(height, width)` label image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SemanticMap {
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![BACKGROUND; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Every label is a palette class or [`BACKGROUND`].
    pub fn validate(&self, palette: &LabelPalette) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(RenderError::Format(format!(
                "{} labels for a {}x{} map",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        match self.labels.iter().find(|&&l| l != BACKGROUND && l as usize >= palette.n_classes) {
            Some(l) => Err(RenderError::Format(format!("label {l} outside palette"))),
            None => Ok(()),
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Share of pixels on which two equally sized maps agree.
pub fn pixel_agreement(a: &SemanticMap, b: &SemanticMap) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(RenderError::Format(format!(
            "maps {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let same = a.labels.iter().zip(&b.labels).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.labels.len().max(1) as f64)
}

/// One primitive per occupied voxel, centered on it with radius half a voxel.
pub fn voxels_to_primitives(grid: &OccupancyGrid, alpha: f64, free_id: u8) -> Vec<Primitive> {
    let [h, w, d] = grid.dims();
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let class_id = grid.get(x, y, z);
                if class_id != free_id {
                    out.push(Primitive {
                        center: grid.voxel_center(x, y, z),
                        class_id,
                        opacity: alpha,
                        radius: grid.voxel_size / 2.0,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplatOptions {
    /// Transmittance early-exit threshold; `None` composites every fragment.
    pub cutoff: Option<f64>,
}

impl Default for SplatOptions {
    fn default() -> Self {
        Self {
            cutoff: Some(TRANSMITTANCE_CUTOFF),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Fragment {
    depth: f64,
    class_id: u8,
    alpha: f64,
}

pub fn splat(prims: &[Primitive], cam: &Camera, palette: &LabelPalette) -> Result<SemanticMap> {
    splat_with(prims, cam, palette, &SplatOptions::default())
}

/// Depth-sorted front-to-back compositing of per-class weights
/// `w_i = α_i Π_{j<i} (1 − α_j)`, labeled by argmax.
pub fn splat_with(prims: &[Primitive], cam: &Camera, palette: &LabelPalette, opts: &SplatOptions) -> Result<SemanticMap> {
    cam.validate()?;
    let (width, height) = (cam.width, cam.height);
    let mut frags: Vec<Vec<Fragment>> = vec![Vec::new(); width * height];
    let (fx, fy, cx, cy) = (cam.fx(), cam.fy(), cam.k[0][2], cam.k[1][2]);
    for p in prims {
        if !(p.opacity > 0.0 && p.opacity <= 1.0) {
            return Err(RenderError::Primitive(format!("opacity {} outside (0, 1]", p.opacity)));
        }
        if p.class_id == palette.free_id || p.class_id as usize >= palette.n_classes {
            return Err(RenderError::Primitive(format!("class {} cannot be splatted", p.class_id)));
        }
        let c = cam.world_to_camera(p.center);
        if c[2] <= NEAR {
            continue;
        }
        let u = fx * c[0] / c[2] + cx;
        let v = fy * c[1] / c[2] + cy;
        let su = (fx * 2.0 * p.radius / c[2]).max(1.0);
        let sv = (fy * 2.0 * p.radius / c[2]).max(1.0);
        // pixel i covers [i, i+1); include it when its center lies in the square
        let cols = pixel_span(u, su, width);
        let rows = pixel_span(v, sv, height);
        let frag = Fragment {
            depth: c[2],
            class_id: p.class_id,
            alpha: p.opacity,
        };
        for r in rows {
            for col in cols.clone() {
                frags[r * width + col].push(frag);
            }
        }
    }
    let mut out = SemanticMap::background(height, width);
    let mut weights = vec![0.0f64; palette.n_classes];
    for (px, list) in frags.iter_mut().enumerate() {
        if list.is_empty() {
            continue;
        }
        list.sort_by(|a, b| {
            a.depth
                .total_cmp(&b.depth)
                .then(a.class_id.cmp(&b.class_id))
                .then(a.alpha.total_cmp(&b.alpha))
        });
        weights.iter_mut().for_each(|w| *w = 0.0);
        let mut t = 1.0;
        for f in list.iter() {
            weights[f.class_id as usize] += f.alpha * t;
            t *= 1.0 - f.alpha;
            if opts.cutoff.is_some_and(|c| t < c) {
                break;
            }
        }
        out.labels[px] = argmax_label(&weights);
    }
    Ok(out)
}

/// Pixels whose centers fall inside `[center - size/2, center + size/2]`; the
/// pixel containing `center` when none do.
fn pixel_span(center: f64, size: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (center - size / 2.0 - 0.5).ceil();
    let hi = (center + size / 2.0 - 0.5).floor();
    let (lo, hi) = if hi < lo { (center.floor(), center.floor()) } else { (lo, hi) };
    let lo = lo.max(0.0);
    let hi = hi.min(n as f64 - 1.0);
    if hi < lo {
        return 0..0;
    }
    lo as usize..hi as usize + 1
}

/// Highest accumulated weight, lowest class id on ties, background when empty.
fn argmax_label(weights: &[f64]) -> u8 {
    let mut best = BACKGROUND;
    let mut best_w = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        if w > best_w {
            best_w = w;
            best = c as u8;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_cam() -> Camera {
        Camera::looking([0.0, 0.0, 0.0], 0.0, 0.0, std::f64::consts::FRAC_PI_2, 33, 33)
    }

    fn prim(x: f64, class_id: u8, opacity: f64) -> Primitive {
        Primitive {
            center: [x, 0.0, 0.0],
            class_id,
            opacity,
            radius: 0.5,
        }
    }

    #[test]
    fn single_primitive_lands_on_principal_point() {
        let palette = LabelPalette::driving();
        let cam = forward_cam();
        let map = splat(&[prim(5.0, 3, 0.95)], &cam, &palette).unwrap();
        // f = 16.5 px, footprint 16.5 / 5 = 3.3 px around (16.5, 16.5)
        assert_eq!(map.get(16, 16), 3);
        assert_eq!(map.count(3), 9);
        assert_eq!(map.get(0, 0), BACKGROUND);
        assert_eq!(map.get(16, 19), BACKGROUND);
    }

    #[test]
    fn nearer_primitive_wins_by_compositing_weight() {
        let palette = LabelPalette::driving();
        let cam = forward_cam();
        let map = splat(&[prim(9.0, 5, 0.95), prim(5.0, 3, 0.95)], &cam, &palette).unwrap();
        assert_eq!(map.get(16, 16), 3);
        // weights 0.95 and 0.05 * 0.95
        assert_eq!(argmax_label(&[0.0, 0.0, 0.0, 0.95, 0.0, 0.0475]), 3);
    }

    #[test]
    fn ties_go_to_lowest_class_and_empty_is_background() {
        assert_eq!(argmax_label(&[0.0, 0.0, 0.3, 0.3]), 2);
        assert_eq!(argmax_label(&[0.0; 6]), BACKGROUND);
        let map = splat(&[], &forward_cam(), &LabelPalette::driving()).unwrap();
        assert_eq!(map.count(BACKGROUND), 33 * 33);
    }

    #[test]
    fn primitives_behind_camera_are_culled() {
        let map = splat(&[prim(-5.0, 3, 0.95)], &forward_cam(), &LabelPalette::driving()).unwrap();
        assert_eq!(map.count(BACKGROUND), 33 * 33);
    }

    #[test]
    fn rejects_free_primitives_and_bad_cameras() {
        let palette = LabelPalette::driving();
        assert!(splat(&[prim(5.0, 0, 0.9)], &forward_cam(), &palette).is_err());
        assert!(splat(&[prim(5.0, 2, 0.0)], &forward_cam(), &palette).is_err());
        let mut cam = forward_cam();
        cam.k[1][1] = -1.0;
        assert!(splat(&[], &cam, &palette).is_err());
    }

    #[test]
    fn span_covers_containing_pixel_when_small() {
        assert_eq!(pixel_span(3.2, 1.0, 10), 3..4);
        assert_eq!(pixel_span(3.5, 3.0, 10), 2..5);
        assert_eq!(pixel_span(-4.0, 2.0, 10), 0..0);
        assert_eq!(pixel_span(9.9, 30.0, 10), 0..10);
    }
}
