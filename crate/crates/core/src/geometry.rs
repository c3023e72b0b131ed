use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};

/// Planar (SE(2)) rigid motion in the bird's-eye-view plane.
///
/// As an ego pose it maps ego-frame points into the world frame. As an
/// inter-frame motion `T_t^{t+1}` it maps points expressed in the next ego frame
/// into the current one, so `pose_{t+1} = pose_t.then(&T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for RigidTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform2D {
    pub const fn new(theta: f64, tx: f64, ty: f64) -> Self {
        Self { theta, tx, ty }
    }

    pub const fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.tx.is_finite() && self.ty.is_finite()
    }

    /// 3x3 homogeneous matrix `[[c, -s, tx], [s, c, ty], [0, 0, 1]]`.
    pub fn as_matrix(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.theta.sin_cos();
        [[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]]
    }

    /// Recover a transform from a homogeneous matrix; the rotation angle is
    /// read with `atan2` so slightly non-orthonormal blocks are tolerated.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        Self::new(m[1][0].atan2(m[0][0]), m[0][2], m[1][2])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * p[0] - s * p[1] + self.tx, s * p[0] + c * p[1] + self.ty]
    }

    /// Composition `self * next`: first move by `self`, then by `next`
    /// (expressed in the frame reached after `self`).
    pub fn then(&self, next: &Self) -> Self {
        let [x, y] = self.apply([next.tx, next.ty]);
        Self::new(wrap_angle(self.theta + next.theta), x, y)
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.theta.sin_cos();
        Self::new(
            wrap_angle(-self.theta),
            -(c * self.tx + s * self.ty),
            -(-s * self.tx + c * self.ty),
        )
    }

    /// Largest absolute difference between the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.as_matrix();
        let b = other.as_matrix();
        let mut m = 0.0f64;
        for r in 0..3 {
            for c in 0..3 {
                m = m.max((a[r][c] - b[r][c]).abs());
            }
        }
        m
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Pinhole camera. `extrinsic` maps ego/world coordinates to camera coordinates
/// (x right, y down, z forward); `k` holds the intrinsics in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub k: [[f64; 3]; 3],
    pub extrinsic: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `position` looking along `yaw` (radians, CCW from +x) tilted down by `pitch`.
    pub fn looking(
        position: [f64; 3],
        yaw: f64,
        pitch: f64,
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cy * cp, sy * cp, -sp];
        let right = [sy, -cy, 0.0];
        // down = forward x right
        let down = [
            forward[1] * right[2] - forward[2] * right[1],
            forward[2] * right[0] - forward[0] * right[2],
            forward[0] * right[1] - forward[1] * right[0],
        ];
        let rows = [right, down, forward];
        let mut extrinsic = [[0.0; 4]; 4];
        for r in 0..3 {
            extrinsic[r][..3].copy_from_slice(&rows[r]);
            extrinsic[r][3] = -(rows[r][0] * position[0] + rows[r][1] * position[1] + rows[r][2] * position[2]);
        }
        extrinsic[3][3] = 1.0;
        let f = width as f64 / 2.0 / (fov_x / 2.0).tan();
        let k = [
            [f, 0.0, width as f64 / 2.0],
            [0.0, f, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        Self {
            k,
            extrinsic,
            width,
            height,
        }
    }

    pub fn fx(&self) -> f64 {
        self.k[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.k[1][1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(OccError::InvalidConfig(format!(
                "degenerate camera: fx={} fy={}",
                self.fx(),
                self.fy()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(OccError::InvalidConfig("camera has zero-size image".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|c| r[i][c] * r[j][c]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(OccError::InvalidConfig(
                        "camera extrinsic rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let e = &self.extrinsic;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = e[r][0] * p[0] + e[r][1] * p[1] + e[r][2] * p[2] + e[r][3];
        }
        out
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = [self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3]];
        let mut c = [0.0; 3];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        c
    }

    /// Camera-frame direction to world-frame direction.
    pub fn camera_dir_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2];
        }
        out
    }
}
