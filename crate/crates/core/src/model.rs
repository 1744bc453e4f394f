//! The Gaussian splatting object model.
//!
//! Parameters are kept in their stored (pre-activation) form: opacity as a
//! logit, scale as a log, rotation as a unit quaternion `(w, x, y, z)`.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::sh::{ShCoeffs, SH_COEFFS};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
}

/// Which appearance parameters are learnable during refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamMask {
    pub learn_sh: bool,
    pub learn_rot: bool,
    pub learn_xyz: bool,
    pub learn_scale: bool,
    pub learn_opacity: bool,
}

impl Default for ParamMask {
    fn default() -> Self {
        Self {
            learn_sh: true,
            learn_rot: true,
            learn_xyz: false,
            learn_scale: false,
            learn_opacity: false,
        }
    }
}

impl ParamMask {
    pub fn none() -> Self {
        Self {
            learn_sh: false,
            learn_rot: false,
            learn_xyz: false,
            learn_scale: false,
            learn_opacity: false,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a quaternion `(w, x, y, z)`; the input is normalized first.
pub fn quaternion_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q.normalize();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `d(sum_ij G_ij R_ij)/dq` for a unit quaternion `q = (w, x, y, z)`, where
/// `R` is built from `q` without normalization.
pub(crate) fn quaternion_matrix_vjp(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Vector4::new(dw, dx, dy, dz)
}

/// Object-frame covariance `R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn covariance_world(rotation: &Vector4<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quaternion_to_matrix(rotation);
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // exact symmetry
    (cov + cov.transpose()) * 0.5
}

impl GaussianCloud {
    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        sh: ShCoeffs,
    ) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh.push(sh);
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        covariance_world(&self.rotations[i], &self.log_scales[i])
    }

    /// Normalizes every quaternion in place.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > 0.0 {
                *q /= n;
            }
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.is_empty() {
            return Vector3::zeros();
        }
        self.positions.iter().sum::<Vector3<f64>>() / self.len() as f64
    }

    /// Bounding radius about the centroid, including 3 sigma of each Gaussian.
    pub fn extent(&self) -> f64 {
        let c = self.centroid();
        self.positions
            .iter()
            .zip(&self.log_scales)
            .map(|(p, s)| (p - c).norm() + 3.0 * s.max().exp())
            .fold(0.0, f64::max)
    }

    /// Maximum pairwise distance between Gaussian centers.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.positions.iter().enumerate() {
            for b in &self.positions[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }

    /// Sanity checks on shapes and finiteness.
    pub fn check(&self) -> Result<(), String> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n
        {
            return Err("per-Gaussian arrays have mismatched lengths".into());
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && !self.opacity_logits[i].is_nan()
                && self.sh[i].iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(format!("Gaussian {i} has non-finite parameters"));
            }
            if self.rotations[i].norm() == 0.0 {
                return Err(format!("Gaussian {i} has a zero quaternion"));
            }
        }
        Ok(())
    }
}

/// Zero SH block.
pub fn zero_sh() -> ShCoeffs {
    [[0.0; SH_COEFFS]; 3]
}
