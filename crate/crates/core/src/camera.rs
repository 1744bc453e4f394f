//! Pinhole camera model and the projection pieces of the splatting pipeline.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::Pose;

/// Points at or in front of this depth are culled.
pub const Z_NEAR: f64 = 1e-2;

/// Screen-space low-pass filter added to every projected covariance (px^2).
pub const COV2D_BLUR: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid intrinsics: {0}")]
pub struct IntrinsicsError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Square image with the principal point at the center.
    pub fn centered(focal: f64, size: usize) -> Self {
        let c = size as f64 / 2.0;
        Self::new(focal, focal, c, c, size, size)
    }

    pub fn validate(&self) -> Result<(), IntrinsicsError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(IntrinsicsError(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(IntrinsicsError("image dimensions must be at least 1".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(IntrinsicsError(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Pixel of a camera-frame point. No depth check.
pub fn project_camera_point(p_c: &Vector3<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    Vector2::new(k.fx * p_c.x / p_c.z + k.cx, k.fy * p_c.y / p_c.z + k.cy)
}

/// Projects an object-frame point; returns the pixel and the camera-frame
/// depth. Callers cull when the depth is at or below [`Z_NEAR`].
pub fn project_point(t_cm: &Pose, k: &CameraIntrinsics, p_m: &Vector3<f64>) -> (Vector2<f64>, f64) {
    let p_c = t_cm.transform_point(p_m);
    (project_camera_point(&p_c, k), p_c.z)
}

/// Jacobian of the perspective projection at `p_c`.
pub fn projection_jacobian(p_c: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / p_c.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p_c.x * iz2, 0.0, k.fy * iz, -k.fy * p_c.y * iz2)
}

/// Screen-space covariance `J R Sigma_m R^T J^T + blur * I`.
pub fn project_covariance(j: &Matrix2x3<f64>, r_cm: &Matrix3<f64>, sigma_m: &Matrix3<f64>) -> Matrix2<f64> {
    let sigma_c = r_cm * sigma_m * r_cm.transpose();
    let m = j * sigma_c * j.transpose();
    let sym = (m + m.transpose()) * 0.5;
    sym + Matrix2::identity() * COV2D_BLUR
}
