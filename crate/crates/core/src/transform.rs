use crate::geometry::RigidTransform2D;
use crate::grid::OccupancyGrid;

/// Resample `grid` into the ego frame reached after moving by `motion`.
///
/// Each output voxel center `p` (in the new frame) reads the label of the input
/// voxel containing `motion.apply(p)` (nearest neighbor); points that land
/// outside the input grid become `free_id`. The z axis is untouched.
/// `transform_grid(transform_grid(g, a), b) == transform_grid(g, a.then(b))`
/// wherever neither path leaves the grid, exactly for lattice motions (quarter
/// turns, whole-voxel shifts) and up to nearest-neighbor snapping otherwise.
pub fn transform_grid(grid: &OccupancyGrid, motion: &RigidTransform2D, free_id: u8) -> OccupancyGrid {
    let [h, w, d] = grid.dims();
    let mut out = grid.clone();
    let (s, c) = motion.theta.sin_cos();
    let vs = grid.voxel_size;
    let [ox, oy, _] = grid.origin;
    for x in 0..h {
        let px = ox + (x as f64 + 0.5) * vs;
        for y in 0..w {
            let py = oy + (y as f64 + 0.5) * vs;
            let sx = c * px - s * py + motion.tx;
            let sy = s * px + c * py + motion.ty;
            let fi = ((sx - ox) / vs).floor();
            let fj = ((sy - oy) / vs).floor();
            let inside = fi >= 0.0 && fi < h as f64 && fj >= 0.0 && fj < w as f64;
            let base = grid.index(x, y, 0);
            if inside {
                let src = grid.index(fi as usize, fj as usize, 0);
                out.labels_mut()[base..base + d].copy_from_slice(&grid.labels()[src..src + d]);
            } else {
                out.labels_mut()[base..base + d].fill(free_id);
            }
        }
    }
    out
}

/// Whether the pre-image of output column `(x, y)` under `motion` lies inside the grid.
pub fn preimage_in_bounds(grid: &OccupancyGrid, motion: &RigidTransform2D, x: usize, y: usize) -> bool {
    let c = grid.voxel_center(x, y, 0);
    let [sx, sy] = motion.apply([c[0], c[1]]);
    grid.locate([sx, sy, c[2]]).is_some()
}
