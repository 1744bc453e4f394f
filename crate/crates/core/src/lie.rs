//! SE(3) / SO(3) machinery for pose refinement.
//!
//! Poses are stored as a rotation matrix plus translation. Tangent vectors use
//! the `[rho; phi]` ordering everywhere: translational block first, rotational
//! block second. All Jacobian column blocks follow the same ordering.

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the Taylor branches are used.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("rotation angle too close to pi for a unique logarithm (trace = {trace})")]
    AngleNearPi { trace: f64 },
    #[error("matrix is not a rotation: {0}")]
    NotRotation(String),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] for the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k2
    } else {
        Matrix3::identity() + (theta.sin() / theta) * k + one_minus_cos_over_sq(theta) * k2
    }
}

/// `(1 - cos t) / t^2` via the half-angle form, stable for small `t`.
fn one_minus_cos_over_sq(theta: f64) -> f64 {
    let s = (0.5 * theta).sin() / theta;
    2.0 * s * s
}

/// `(t - sin t) / t^3`, by series where the difference cancels.
fn t_minus_sin_over_cube(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < 1e-2 {
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362_880.0
    } else {
        (theta - theta.sin()) / (t2 * theta)
    }
}

/// `(1 - (t/2) cot(t/2)) / t^2`, by series where the difference cancels.
fn inv_jacobian_coef(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < 1e-2 {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30_240.0 + t2 * t2 * t2 / 1_209_600.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / t2
    }
}

/// Left Jacobian of SO(3), the `V` matrix coupling `rho` into the translation.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * k + k * k / 6.0
    } else {
        Matrix3::identity() + one_minus_cos_over_sq(theta) * k + t_minus_sin_over_cube(theta) * k * k
    }
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * k + k * k / 12.0
    } else {
        Matrix3::identity() - 0.5 * k + inv_jacobian_coef(theta) * k * k
    }
}

/// Rotation vector of `r`. Fails when the angle is within ~1e-3 rad of pi.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, LieError> {
    let trace = r.trace();
    if trace <= -1.0 + 1e-6 {
        return Err(LieError::AngleNearPi { trace });
    }
    let cos = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis_sin = vee(r);
    let sin = axis_sin.norm();
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        // R ~ I + hat(phi)
        return Ok(axis_sin);
    }
    if cos > -0.5 {
        return Ok(axis_sin * (theta / sin));
    }
    // Large angles: recover the axis from the symmetric part, sign from vee.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let scale = 1.0 - cos;
    let mut col = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(col, col)] {
            col = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(col).into_owned() / scale;
    axis /= axis.norm();
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Element of se(3) ordered as `[rho; phi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Tangent {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    /// 4x4 matrix form `[[hat(phi), rho], [0, 0]]`.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&self.phi));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.rho);
        m
    }
}

impl std::ops::Neg for Tangent {
    type Output = Tangent;
    fn neg(self) -> Tangent {
        Tangent::new(-self.rho, -self.phi)
    }
}

/// Rigid transform `T_cm`: maps object-frame points into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center expressed in the object frame, `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// SE(3) adjoint in `[rho; phi]` ordering: `T exp(tau) T^-1 = exp(Ad_T tau)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    /// Checks the rotation block: orthonormal and right-handed within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), LieError> {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(LieError::NotRotation("non-finite entry".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).amax();
        if err > tol {
            return Err(LieError::NotRotation(format!(
                "R^T R deviates from identity by {err:e}"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > tol {
            return Err(LieError::NotRotation(format!("det(R) = {det}")));
        }
        Ok(())
    }
}

pub fn se3_exp(tau: &Tangent) -> Pose {
    Pose::new(so3_exp(&tau.phi), so3_left_jacobian(&tau.phi) * tau.rho)
}

pub fn se3_log(t: &Pose) -> Result<Tangent, LieError> {
    let phi = so3_log(&t.rotation)?;
    let rho = so3_left_jacobian_inv(&phi) * t.translation;
    Ok(Tangent::new(rho, phi))
}

/// `exp(tau) * T`: perturbs the camera frame.
pub fn apply_left_perturbation(tau: &Tangent, t: &Pose) -> Pose {
    se3_exp(tau).compose(t)
}

/// `T * exp(tau)`: perturbs the object frame.
pub fn apply_right_perturbation(tau: &Tangent, t: &Pose) -> Pose {
    t.compose(&se3_exp(tau))
}

/// `d(exp(tau) p_c)/d tau` at zero: `[I | -hat(p_c)]`.
pub fn point_jacobian_left(p_c: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(p_c)));
    j
}

/// `d(T exp(tau) p_m)/d tau` at zero: `[R | -R hat(p_m)]`.
pub fn point_jacobian_right(t: &Pose, p_m: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(t.rotation * hat(p_m))));
    j
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = vee(&rel).norm();
    sin.atan2(cos)
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseJson {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = PoseJson::deserialize(d)?;
        let pose = Pose::new(Matrix3::from_row_slice(&raw.rotation), Vector3::from(raw.translation));
        pose.validate(1e-6).map_err(serde::de::Error::custom)?;
        Ok(pose)
    }
}
