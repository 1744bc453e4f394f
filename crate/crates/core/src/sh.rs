//! Real spherical harmonics up to degree 3, in the ordering and sign
//! convention used by reference 3DGS renderers.

use nalgebra::Vector3;

/// Coefficients per color channel (degree 3).
pub const SH_COEFFS: usize = 16;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the raw SH sum before clamping.
pub const COLOR_OFFSET: f64 = 0.5;

/// Per-channel coefficients, `coeffs[channel][k]`.
pub type ShCoeffs = [[f64; SH_COEFFS]; 3];

/// Basis values `Y_k(dir)`.
pub fn sh_basis(dir: &Vector3<f64>) -> [f64; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial w.r.t. `(x, y, z)`.
///
/// These treat the polynomials as functions on R^3; callers project onto the
/// sphere through the normalization Jacobian.
pub fn sh_basis_grad(dir: &Vector3<f64>) -> [Vector3<f64>; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let v = Vector3::new;
    [
        v(0.0, 0.0, 0.0),
        v(0.0, -SH_C1, 0.0),
        v(0.0, 0.0, SH_C1),
        v(-SH_C1, 0.0, 0.0),
        v(SH_C2[0] * y, SH_C2[0] * x, 0.0),
        v(0.0, SH_C2[1] * z, SH_C2[1] * y),
        v(-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z),
        v(SH_C2[3] * z, 0.0, SH_C2[3] * x),
        v(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0),
        v(SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0),
        v(SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
        v(
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ),
        v(
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ),
        v(
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ),
        v(SH_C3[5] * 2.0 * x * z, SH_C3[5] * (-2.0 * y * z), SH_C3[5] * (xx - yy)),
        v(SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0),
    ]
}

/// Raw (unclamped) color: `sum_k coeffs[c][k] Y_k(dir) + 0.5`.
pub fn evaluate_sh_raw(coeffs: &ShCoeffs, dir: &Vector3<f64>) -> [f64; 3] {
    let basis = sh_basis(dir);
    let mut rgb = [COLOR_OFFSET; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out += coeffs[c].iter().zip(basis.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    rgb
}

/// View-dependent color clamped to `[0, inf)`.
pub fn evaluate_sh(coeffs: &ShCoeffs, dir: &Vector3<f64>) -> [f64; 3] {
    evaluate_sh_raw(coeffs, dir).map(|v| v.max(0.0))
}
