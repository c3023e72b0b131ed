use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::geometry::RigidTransform2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Command {
    GoStraight,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::GoStraight, Command::TurnLeft, Command::TurnRight, Command::Stop];

    pub fn index(self) -> usize {
        match self {
            Command::GoStraight => 0,
            Command::TurnLeft => 1,
            Command::TurnRight => 2,
            Command::Stop => 3,
        }
    }

    /// Command implied by a single-step ego motion.
    pub fn from_motion(motion: &RigidTransform2D) -> Self {
        let dist = (motion.tx * motion.tx + motion.ty * motion.ty).sqrt();
        if dist < 0.05 {
            Command::Stop
        } else if motion.theta > 0.02 {
            Command::TurnLeft
        } else if motion.theta < -0.02 {
            Command::TurnRight
        } else {
            Command::GoStraight
        }
    }
}

/// Driving control at one step: high-level command, future waypoints in the
/// current ego frame, and the ground-truth motion to the next frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub command: Command,
    pub waypoints: Vec<[f64; 2]>,
    pub gt_transform: RigidTransform2D,
}

impl ControlSignal {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(OccError::InvalidConfig("control signal needs at least one waypoint".into()));
        }
        if !self.gt_transform.is_finite() || self.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(OccError::InvalidConfig("control signal has non-finite values".into()));
        }
        Ok(())
    }
}
