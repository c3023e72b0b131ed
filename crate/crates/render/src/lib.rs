//! Occupancy splatting: occupied voxels become near-opaque primitives that are
//! depth-sorted and alpha-composited per class into camera label maps. A
//! first-hit ray marcher serves as an independent reference.

pub mod error;
pub mod export;
pub mod oracle;
pub mod splat;

use occdrive_core::{Camera, LabelPalette, OccupancyGrid};

pub use error::{RenderError, Result};
pub use export::{read_condition_stack, write_condition_stack, write_png, ConditionStack, CondManifest};
pub use oracle::raymarch_oracle;
pub use splat::{
    pixel_agreement, splat, splat_with, voxels_to_primitives, Primitive, SemanticMap, SplatOptions, BACKGROUND,
    DEFAULT_ALPHA,
};

/// Render one grid from every camera of the rig.
pub fn render_grid(grid: &OccupancyGrid, rig: &[Camera], palette: &LabelPalette, alpha: f64) -> Result<Vec<SemanticMap>> {
    if rig.is_empty() {
        return Err(RenderError::Config("camera rig is empty".into()));
    }
    let prims = voxels_to_primitives(grid, alpha, palette.free_id);
    rig.iter().map(|cam| splat(&prims, cam, palette)).collect()
}

/// Maps indexed `[frame][view]`.
pub fn render_sequence(
    frames: &[OccupancyGrid],
    rig: &[Camera],
    palette: &LabelPalette,
    alpha: f64,
) -> Result<Vec<Vec<SemanticMap>>> {
    frames.iter().map(|g| render_grid(g, rig, palette, alpha)).collect()
}
