use occdrive_core::{Camera, LabelPalette, OccupancyGrid};

use crate::error::Result;
use crate::splat::{SemanticMap, BACKGROUND};

/// Ray samples per voxel length.
pub const STEPS_PER_VOXEL: f64 = 8.0;

/// First occupied voxel along each pixel-center ray, sampled uniformly.
pub fn raymarch_oracle(grid: &OccupancyGrid, cam: &Camera, palette: &LabelPalette) -> Result<SemanticMap> {
    cam.validate()?;
    let origin = cam.center();
    let [h, w, d] = grid.dims();
    let lo = grid.origin;
    let hi = [
        lo[0] + h as f64 * grid.voxel_size,
        lo[1] + w as f64 * grid.voxel_size,
        lo[2] + d as f64 * grid.voxel_size,
    ];
    let step = grid.voxel_size / STEPS_PER_VOXEL;
    let mut out = SemanticMap::background(cam.height, cam.width);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let dc = [
                (col as f64 + 0.5 - cam.k[0][2]) / cam.fx(),
                (row as f64 + 0.5 - cam.k[1][2]) / cam.fy(),
                1.0,
            ];
            let dir = normalize(cam.camera_dir_to_world(dc));
            let Some((t0, t1)) = slab(origin, dir, lo, hi) else { continue };
            let mut t = t0.max(0.0) + step / 2.0;
            while t < t1 {
                let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                if let Some([x, y, z]) = grid.locate(p) {
                    let l = grid.get(x, y, z);
                    if l != palette.free_id {
                        out.labels[row * cam.width + col] = l;
                        break;
                    }
                }
                t += step;
            }
        }
    }
    debug_assert!(out.labels.iter().all(|&l| l == BACKGROUND || (l as usize) < palette.n_classes));
    Ok(out)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Parametric interval where the ray lies inside the box.
fn slab(o: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo[a] - o[a]) / dir[a], (hi[a] - o[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t1 > t0.max(0.0)).then_some((t0, t1))
}
