use crate::control::ControlSignal;
use crate::error::{OccError, Result};
use crate::geometry::{Camera, RigidTransform2D};
use crate::grid::{LabelPalette, OccupancyGrid};

/// Tolerance for `ego_poses[t]^-1 * ego_poses[t+1] == controls[t].gt_transform`.
pub const POSE_CONSISTENCY_TOL: f64 = 1e-6;

/// A time-indexed run of ego-frame occupancy grids with the controls between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<OccupancyGrid>,
    pub controls: Vec<ControlSignal>,
    pub ego_poses: Vec<RigidTransform2D>,
    pub camera_rig: Vec<Camera>,
    pub fps: f64,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.frames.first().map(|f| f.dims())
    }

    pub fn validate(&self, palette: &LabelPalette) -> Result<()> {
        if self.frames.is_empty() {
            return Err(OccError::Consistency("sequence has no frames".into()));
        }
        if self.controls.len() + 1 != self.frames.len() {
            return Err(OccError::Consistency(format!(
                "{} controls for {} frames",
                self.controls.len(),
                self.frames.len()
            )));
        }
        if self.ego_poses.len() != self.frames.len() {
            return Err(OccError::Consistency(format!(
                "{} ego poses for {} frames",
                self.ego_poses.len(),
                self.frames.len()
            )));
        }
        let dims = self.frames[0].dims();
        for f in &self.frames {
            if f.dims() != dims {
                return Err(OccError::ShapeMismatch(dims, f.dims()));
            }
            f.validate(palette)?;
        }
        for c in &self.controls {
            c.validate()?;
        }
        self.check_pose_consistency()
    }

    pub fn check_pose_consistency(&self) -> Result<()> {
        for (t, c) in self.controls.iter().enumerate() {
            let rel = self.ego_poses[t].inverse().then(&self.ego_poses[t + 1]);
            let err = rel.max_abs_diff(&c.gt_transform);
            if !(err <= POSE_CONSISTENCY_TOL) {
                return Err(OccError::Consistency(format!(
                    "pose/control mismatch at step {t}: {err:e}"
                )));
            }
        }
        Ok(())
    }
}
