//! Shared domain types for the occupancy world model.
//!
//! Everything here is a pure function of its inputs: occupancy grids and their
//! label palette, planar ego motion, driving controls, scene sequences, the
//! IoU / mIoU metrics, grid editing and a deterministic synthetic scene
//! generator that stands in for real driving data.

pub mod control;
pub mod edit;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod sequence;
pub mod synth;
pub mod transform;

pub use control::{Command, ControlSignal};
pub use edit::{edit_grid, BBox, EditSpec};
pub use error::{OccError, Result};
pub use geometry::{Camera, RigidTransform2D};
pub use grid::{LabelPalette, OccupancyGrid};
pub use io::{load_sequence, save_sequence};
pub use metrics::{compute_iou, compute_miou, MiouAccumulator, MiouResult};
pub use sequence::SceneSequence;
pub use synth::{default_camera_rig, generate_synthetic_sequence, SceneGenConfig};
pub use transform::transform_grid;
