use serde::{Deserialize, Serialize};

use super::rotation::Vec3;
use crate::error::{Error, Result};

/// Minimum depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "camera focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Jacobian of the projection with respect to the 3D point, rows `(u, v)`.
    pub fn project_jacobian(&self, x: &Vec3) -> Result<[[f64; 3]; 2]> {
        if !(x.z > MIN_DEPTH) {
            return Err(Error::BehindCamera { z: x.z });
        }
        let iz = 1.0 / x.z;
        Ok([
            [self.fx * iz, 0.0, -self.fx * x.x * iz * iz],
            [0.0, self.fy * iz, -self.fy * x.y * iz * iz],
        ])
    }
}

/// Projects a camera-space point to pixel coordinates.
pub fn perspective_project(k: &CameraIntrinsics, x: &Vec3) -> Result<[f64; 2]> {
    if !(x.z > MIN_DEPTH) {
        return Err(Error::BehindCamera { z: x.z });
    }
    Ok([k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy])
}
