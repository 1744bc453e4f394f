//! Reverse-mode derivatives of the forward renderer.
//!
//! The pass runs in two phases. The first walks each pixel tape back to front
//! and accumulates screen-space gradients (center, conic, color) per splat,
//! tile by tile. The second chains those through the projection, the
//! covariance and the SH view direction to camera-frame quantities, from which
//! pose and appearance gradients are assembled.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{projection_jacobian, CameraIntrinsics};
use crate::image::Image;
use crate::lie::Pose;
use crate::model::{quaternion_matrix_vjp, quaternion_to_matrix, GaussianCloud, ParamMask};
use crate::render::{RenderOutput, Splat2D, TapeEntry, ALPHA_MAX};
use crate::sh::{sh_basis, sh_basis_grad, ShCoeffs, SH_COEFFS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackwardError {
    #[error("tape mismatch: {0}")]
    TapeMismatch(String),
}

/// Which side of `T_cm` a tangent perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `exp(tau) * T`, the camera frame.
    Left,
    /// `T * exp(tau)`, the object frame.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGradient {
    pub d_tau: Vector6<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub d_sh: Vec<ShCoeffs>,
    pub d_rot: Vec<Vector4<f64>>,
}

/// Gradient w.r.t. one tape entry's alpha and color.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EntryGrad {
    pub d_alpha: f64,
    pub d_color: [f64; 3],
}

/// Per-splat gradients after the screen-space chain, in camera-frame terms.
#[derive(Debug, Clone)]
pub struct SplatGrad {
    pub gaussian: usize,
    /// dL/d(camera-frame center).
    pub d_p_c: Vector3<f64>,
    /// Camera-frame covariance `R Sigma_m R^T`.
    pub cov_c: Matrix3<f64>,
    /// dL/d(camera-frame covariance).
    pub d_cov_c: Matrix3<f64>,
    /// dL/d(camera center expressed in the object frame), via SH color.
    pub d_cam: Vector3<f64>,
    /// dL/d(raw SH color), zero on channels clamped at 0.
    pub d_color: [f64; 3],
}

fn check_shapes(output: &RenderOutput, dl: &Image) -> Result<(), BackwardError> {
    if dl.width != output.width || dl.height != output.height || dl.channels != 3 {
        return Err(BackwardError::TapeMismatch(format!(
            "gradient image is {}x{}x{}, render is {}x{}x3",
            dl.width, dl.height, dl.channels, output.width, output.height
        )));
    }
    if output.tape.ranges.len() != output.width * output.height {
        return Err(BackwardError::TapeMismatch(format!(
            "tape covers {} pixels, image has {}",
            output.tape.ranges.len(),
            output.width * output.height
        )));
    }
    Ok(())
}

/// Upstream gradient at pixel `p`, zeroed on channels the output clamp at 1
/// saturated.
#[inline]
fn pixel_upstream(output: &RenderOutput, dl: &Image, p: usize) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (c, gc) in g.iter_mut().enumerate() {
        if output.color_raw.data[p * 3 + c] <= 1.0 {
            *gc = dl.data[p * 3 + c];
        }
    }
    g
}

/// Back-to-front sweep over one pixel tape, calling `f(i, d_alpha, d_color)`
/// for each entry.
#[inline]
fn sweep_pixel(splats: &[Splat2D], entries: &[TapeEntry], g: &[f64; 3], mut f: impl FnMut(usize, f64, [f64; 3])) {
    let mut suffix = [0.0; 3];
    for (i, e) in entries.iter().enumerate().rev() {
        let col = &splats[e.splat as usize].color;
        let w = e.alpha * e.transmittance;
        let inv = 1.0 / (1.0 - e.alpha);
        let mut d_alpha = 0.0;
        let mut d_color = [0.0; 3];
        for c in 0..3 {
            d_color[c] = g[c] * w;
            d_alpha += g[c] * (col[c] * e.transmittance - suffix[c] * inv);
            suffix[c] += col[c] * w;
        }
        f(i, d_alpha, d_color);
    }
}

/// Gradient of the loss w.r.t. every tape entry's alpha and (clamped) color,
/// in tape order.
pub fn composite_backward(output: &RenderOutput, dl_dpixel: &Image) -> Result<Vec<EntryGrad>, BackwardError> {
    check_shapes(output, dl_dpixel)?;
    let mut grads = vec![EntryGrad::default(); output.tape.entries.len()];
    for p in 0..output.width * output.height {
        let range = output.tape.ranges[p].clone();
        let g = pixel_upstream(output, dl_dpixel, p);
        let base = range.start as usize;
        sweep_pixel(&output.splats, output.tape.pixel(p), &g, |i, d_alpha, d_color| {
            grads[base + i] = EntryGrad { d_alpha, d_color };
        });
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy)]
struct ScreenGrad {
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    color: [f64; 3],
}

impl ScreenGrad {
    fn zero() -> Self {
        Self {
            center: Vector2::zeros(),
            conic: Matrix2::zeros(),
            color: [0.0; 3],
        }
    }

    fn add(&mut self, o: &ScreenGrad) {
        self.center += o.center;
        self.conic += o.conic;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
    }
}

/// Screen-space gradients per splat, accumulated tile by tile and merged in
/// tile order.
fn screen_gradients(output: &RenderOutput, dl: &Image) -> Result<Vec<ScreenGrad>, BackwardError> {
    let splats = &output.splats;
    let per_tile: Vec<Result<Vec<ScreenGrad>, BackwardError>> = output
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![ScreenGrad::zero(); list.len()];
            let (x0, y0, x1, y1) = output.tile_rect(t);
            let mut missing = None;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * output.width + x;
                    let entries = output.tape.pixel(p);
                    if entries.is_empty() {
                        continue;
                    }
                    let g = pixel_upstream(output, dl, p);
                    let (px, py) = (x as f64, y as f64);
                    sweep_pixel(splats, entries, &g, |i, d_alpha, d_color| {
                        let sid = entries[i].splat;
                        let Ok(slot) = list.binary_search(&sid) else {
                            missing = Some(sid);
                            return;
                        };
                        let a = &mut acc[slot];
                        for c in 0..3 {
                            a.color[c] += d_color[c];
                        }
                        let s = &splats[sid as usize];
                        let d = Vector2::new(px - s.center.x, py - s.center.y);
                        let cd = s.conic * d;
                        let falloff = (-0.5 * d.dot(&cd)).exp();
                        let raw = s.opacity * falloff;
                        if raw > ALPHA_MAX {
                            return;
                        }
                        a.center += cd * (d_alpha * raw);
                        a.conic += d * d.transpose() * (-0.5 * d_alpha * raw);
                    });
                }
            }
            match missing {
                Some(sid) => Err(BackwardError::TapeMismatch(format!(
                    "splat {sid} appears on a tape outside its tiles"
                ))),
                None => Ok(acc),
            }
        })
        .collect();

    let mut total = vec![ScreenGrad::zero(); splats.len()];
    for (list, tile) in output.tiles.iter().zip(per_tile) {
        let tile = tile?;
        for (sid, g) in list.iter().zip(tile.iter()) {
            total[*sid as usize].add(g);
        }
    }
    Ok(total)
}

/// Chains the compositing gradients back to camera-frame quantities for every
/// visible splat, in composite order.
pub fn splat_gradients(
    cloud: &GaussianCloud,
    t_cm: &Pose,
    k: &CameraIntrinsics,
    output: &RenderOutput,
    dl_dpixel: &Image,
) -> Result<Vec<SplatGrad>, BackwardError> {
    check_shapes(output, dl_dpixel)?;
    if output.splats.iter().any(|s| s.gaussian >= cloud.len()) {
        return Err(BackwardError::TapeMismatch(
            "render references Gaussians missing from the cloud".into(),
        ));
    }
    let screen = screen_gradients(output, dl_dpixel)?;
    let r = &t_cm.rotation;
    Ok(output
        .splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, sg)| {
            let i = s.gaussian;
            let p = &s.p_c;
            let j = projection_jacobian(p, k);
            let cov_c = r * cloud.covariance(i) * r.transpose();

            let d_cov2 = -(s.conic * sg.conic * s.conic);
            let d_cov_c = j.transpose() * d_cov2 * j;
            let d_j = 2.0 * d_cov2 * j * cov_c;

            let iz = 1.0 / p.z;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            let mut d_p_c = j.transpose() * sg.center;
            d_p_c.x += d_j[(0, 2)] * (-k.fx * iz2);
            d_p_c.y += d_j[(1, 2)] * (-k.fy * iz2);
            d_p_c.z += d_j[(0, 0)] * (-k.fx * iz2)
                + d_j[(0, 2)] * (2.0 * k.fx * p.x * iz3)
                + d_j[(1, 1)] * (-k.fy * iz2)
                + d_j[(1, 2)] * (2.0 * k.fy * p.y * iz3);

            let mut d_color = [0.0; 3];
            for c in 0..3 {
                if s.color_raw[c] > 0.0 {
                    d_color[c] = sg.color[c];
                }
            }
            let basis_grad = sh_basis_grad(&s.view_dir);
            let sh = &cloud.sh[i];
            let mut d_dir = Vector3::zeros();
            for c in 0..3 {
                if d_color[c] == 0.0 {
                    continue;
                }
                for kk in 1..SH_COEFFS {
                    d_dir += basis_grad[kk] * (d_color[c] * sh[c][kk]);
                }
            }
            let dir = &s.view_dir;
            let d_v = (d_dir - dir * dir.dot(&d_dir)) / s.view_dist;

            SplatGrad {
                gaussian: i,
                d_p_c,
                cov_c,
                d_cov_c,
                d_cam: -d_v,
                d_color,
            }
        })
        .collect())
}

/// `vee`-style contraction of `tr(hat(phi) (A G - G A))` into a 3-vector.
#[inline]
fn commutator_grad(a: &Matrix3<f64>, g: &Matrix3<f64>) -> Vector3<f64> {
    let m = a * g - g * a;
    Vector3::new(m[(1, 2)] - m[(2, 1)], m[(2, 0)] - m[(0, 2)], m[(0, 1)] - m[(1, 0)])
}

/// Assembles dL/dtau at `tau = 0` for a left or right perturbation of `t_cm`.
pub fn pose_gradient(cloud: &GaussianCloud, t_cm: &Pose, grads: &[SplatGrad], side: Side) -> PoseGradient {
    let r = &t_cm.rotation;
    let rt = r.transpose();
    let cam = t_cm.camera_center();
    let mut d_rho = Vector3::zeros();
    let mut d_phi = Vector3::zeros();
    for g in grads {
        match side {
            Side::Left => {
                let p_c = t_cm.transform_point(&cloud.positions[g.gaussian]);
                d_rho += g.d_p_c;
                d_phi += p_c.cross(&g.d_p_c);
                d_phi += commutator_grad(&g.cov_c, &g.d_cov_c);
                d_rho -= r * g.d_cam;
            }
            Side::Right => {
                let mu = &cloud.positions[g.gaussian];
                let gp = rt * g.d_p_c;
                d_rho += gp;
                d_phi += mu.cross(&gp);
                let cov_m = rt * g.cov_c * r;
                let d_cov_m = rt * g.d_cov_c * r;
                d_phi += commutator_grad(&cov_m, &d_cov_m);
                d_rho -= g.d_cam;
                d_phi += g.d_cam.cross(&cam);
            }
        }
    }
    PoseGradient {
        d_tau: Vector6::new(d_rho.x, d_rho.y, d_rho.z, d_phi.x, d_phi.y, d_phi.z),
    }
}

/// SH and rotation gradients for every Gaussian; masked-off blocks are zero.
pub fn param_gradients(cloud: &GaussianCloud, t_cm: &Pose, grads: &[SplatGrad], mask: &ParamMask) -> ParamGradients {
    let n = cloud.len();
    let mut out = ParamGradients {
        d_sh: vec![[[0.0; SH_COEFFS]; 3]; n],
        d_rot: vec![Vector4::zeros(); n],
    };
    let r = &t_cm.rotation;
    let rt = r.transpose();
    let cam = t_cm.camera_center();
    for g in grads {
        let i = g.gaussian;
        if mask.learn_sh {
            let v = cloud.positions[i] - cam;
            let basis = sh_basis(&(v / v.norm()));
            for c in 0..3 {
                if g.d_color[c] != 0.0 {
                    for kk in 0..SH_COEFFS {
                        out.d_sh[i][c][kk] = g.d_color[c] * basis[kk];
                    }
                }
            }
        }
        if mask.learn_rot {
            let q = &cloud.rotations[i];
            let qn = q.norm();
            let qh = q / qn;
            let s = Matrix3::from_diagonal(&cloud.log_scales[i].map(f64::exp));
            let m = quaternion_to_matrix(q) * s;
            let d_cov_m = rt * g.d_cov_c * r;
            let d_rot_mat = 2.0 * d_cov_m * m * s;
            let gh = quaternion_matrix_vjp(&qh, &d_rot_mat);
            out.d_rot[i] = (gh - qh * qh.dot(&gh)) / qn;
        }
    }
    out
}

pub fn camera_pose_gradient(
    cloud: &GaussianCloud,
    t_cm: &Pose,
    k: &CameraIntrinsics,
    output: &RenderOutput,
    dl_dpixel: &Image,
) -> Result<PoseGradient, BackwardError> {
    let g = splat_gradients(cloud, t_cm, k, output, dl_dpixel)?;
    Ok(pose_gradient(cloud, t_cm, &g, Side::Left))
}

pub fn object_pose_gradient(
    cloud: &GaussianCloud,
    t_cm: &Pose,
    k: &CameraIntrinsics,
    output: &RenderOutput,
    dl_dpixel: &Image,
) -> Result<PoseGradient, BackwardError> {
    let g = splat_gradients(cloud, t_cm, k, output, dl_dpixel)?;
    Ok(pose_gradient(cloud, t_cm, &g, Side::Right))
}

pub fn appearance_gradients(
    cloud: &GaussianCloud,
    t_cm: &Pose,
    k: &CameraIntrinsics,
    output: &RenderOutput,
    dl_dpixel: &Image,
    mask: &ParamMask,
) -> Result<ParamGradients, BackwardError> {
    let g = splat_gradients(cloud, t_cm, k, output, dl_dpixel)?;
    Ok(param_gradients(cloud, t_cm, &g, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{apply_left_perturbation, apply_right_perturbation, se3_exp, Tangent};
    use crate::model::{logit, zero_sh};
    use crate::render::render;
    use crate::sh::SH_C0;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::centered(80.0, 64)
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::empty();
        for _ in 0..n {
            let mut sh = zero_sh();
            for ch in sh.iter_mut() {
                for v in ch.iter_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
                ch[0] = rng.random_range(-1.0..1.0);
            }
            c.push(
                Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6)),
                Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                Vector3::from_fn(|_, _| rng.random_range(-2.8..-1.6)),
                logit(rng.random_range(0.3..0.9)),
                sh,
            );
        }
        c
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let tau = Tangent::new(
            Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 4.0),
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        );
        se3_exp(&tau)
    }

    fn linear_loss(out: &RenderOutput, w: &Image) -> f64 {
        out.color.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    }

    fn weights(rng: &mut ChaCha8Rng, k: &CameraIntrinsics) -> Image {
        Image::from_vec(
            k.width,
            k.height,
            3,
            (0..k.pixel_count() * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        let d = (a - b).abs();
        d <= abs || d <= rel * a.abs().max(b.abs())
    }

    #[test]
    fn single_entry_composite() {
        let mut c = GaussianCloud::empty();
        let mut sh = zero_sh();
        sh[0][0] = 0.5;
        c.push(
            Vector3::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::repeat(0.05f64.ln()),
            logit(0.8),
            sh,
        );
        let k = CameraIntrinsics::centered(50.0, 16);
        let out = render(&c, &Pose::from_translation(Vector3::new(0.0, 0.0, 3.0)), &k).unwrap();
        let dl = Image::filled(16, 16, 3, 1.0);
        let g = composite_backward(&out, &dl).unwrap();
        let p = 8 * 16 + 8;
        let r = out.tape.ranges[p].clone();
        assert_eq!(r.len(), 1);
        let e = out.tape.entries[r.start as usize];
        let eg = g[r.start as usize];
        let col = out.splats[0].color;
        assert_eq!(eg.d_color, [e.alpha; 3]);
        assert!((eg.d_alpha - (col[0] + col[1] + col[2])).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_scene(&mut rng, 20);
        let t = random_pose(&mut rng);
        let k = k64();
        let out = render(&c, &t, &k).unwrap();
        let dl = Image::zeros(64, 64, 3);
        assert!(composite_backward(&out, &dl)
            .unwrap()
            .iter()
            .all(|g| *g == EntryGrad::default()));
        let sg = splat_gradients(&c, &t, &k, &out, &dl).unwrap();
        assert_eq!(pose_gradient(&c, &t, &sg, Side::Left).d_tau, Vector6::zeros());
        assert_eq!(pose_gradient(&c, &t, &sg, Side::Right).d_tau, Vector6::zeros());
        let pg = param_gradients(&c, &t, &sg, &ParamMask::default());
        assert!(pg.d_rot.iter().all(|v| *v == Vector4::zeros()));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_scene(&mut rng, 3);
        let out = render(&c, &random_pose(&mut rng), &k64()).unwrap();
        assert!(matches!(
            composite_backward(&out, &Image::zeros(63, 64, 3)),
            Err(BackwardError::TapeMismatch(_))
        ));
    }

    // Two-splat pixel checked against an independent closed form.
    #[test]
    fn two_layer_composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let alpha = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
            let col: [[f64; 3]; 2] = [
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            ];
            let g: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let pix = |a: [f64; 2], c: [[f64; 3]; 2]| -> f64 {
                (0..3)
                    .map(|ch| g[ch] * (c[0][ch] * a[0] + c[1][ch] * a[1] * (1.0 - a[0])))
                    .sum()
            };
            let splats: Vec<Splat2D> = (0..2)
                .map(|i| Splat2D {
                    gaussian: i,
                    center: Vector2::zeros(),
                    cov2d: Matrix2::identity(),
                    conic: Matrix2::identity(),
                    p_c: Vector3::new(0.0, 0.0, 1.0 + i as f64),
                    view_dir: Vector3::z(),
                    view_dist: 1.0,
                    color: col[i],
                    color_raw: col[i],
                    opacity: alpha[i],
                    radius: 1.0,
                })
                .collect();
            let entries = [
                TapeEntry {
                    splat: 0,
                    alpha: alpha[0],
                    transmittance: 1.0,
                },
                TapeEntry {
                    splat: 1,
                    alpha: alpha[1],
                    transmittance: 1.0 - alpha[0],
                },
            ];
            let mut got = [EntryGrad::default(); 2];
            sweep_pixel(&splats, &entries, &g, |i, d_alpha, d_color| {
                got[i] = EntryGrad { d_alpha, d_color }
            });
            let h = 1e-5;
            for i in 0..2 {
                let (mut ap, mut am) = (alpha, alpha);
                ap[i] += h;
                am[i] -= h;
                let fd = (pix(ap, col) - pix(am, col)) / (2.0 * h);
                assert!((fd - got[i].d_alpha).abs() < 1e-5);
                for ch in 0..3 {
                    let (mut cp, mut cm) = (col, col);
                    cp[i][ch] += h;
                    cm[i][ch] -= h;
                    let fd = (pix(alpha, cp) - pix(alpha, cm)) / (2.0 * h);
                    assert!((fd - got[i].d_color[ch]).abs() < 1e-5);
                }
            }
        }
    }

    fn pose_fd(c: &GaussianCloud, t: &Pose, k: &CameraIntrinsics, w: &Image, side: Side, h: f64) -> Vector6<f64> {
        Vector6::from_fn(|a, _| {
            let mut e = Vector6::zeros();
            e[a] = h;
            let perturb = |v: Vector6<f64>| {
                let tau = Tangent::from_vector(&v);
                match side {
                    Side::Left => apply_left_perturbation(&tau, t),
                    Side::Right => apply_right_perturbation(&tau, t),
                }
            };
            let lp = linear_loss(&render(c, &perturb(e), k).unwrap(), w);
            let lm = linear_loss(&render(c, &perturb(-e), k).unwrap(), w);
            (lp - lm) / (2.0 * h)
        })
    }

    #[test]
    fn pose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = k64();
        for _ in 0..4 {
            let c = random_scene(&mut rng, 30);
            let t = random_pose(&mut rng);
            let w = weights(&mut rng, &k);
            let out = render(&c, &t, &k).unwrap();
            let sg = splat_gradients(&c, &t, &k, &out, &w).unwrap();
            for side in [Side::Left, Side::Right] {
                let an = pose_gradient(&c, &t, &sg, side).d_tau;
                let fd = pose_fd(&c, &t, &k, &w, side, 1e-5);
                for a in 0..6 {
                    assert!(close(an[a], fd[a], 0.02, 1e-3), "{side:?} {a}: {} vs {}", an[a], fd[a]);
                }
            }
        }
    }

    #[test]
    fn identity_pose_left_equals_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = random_scene(&mut rng, 25);
        for p in c.positions.iter_mut() {
            p.z += 4.0;
        }
        let k = k64();
        let t = Pose::identity();
        let out = render(&c, &t, &k).unwrap();
        let w = weights(&mut rng, &k);
        let sg = splat_gradients(&c, &t, &k, &out, &w).unwrap();
        let l = pose_gradient(&c, &t, &sg, Side::Left).d_tau;
        let r = pose_gradient(&c, &t, &sg, Side::Right).d_tau;
        assert!((l - r).amax() <= 1e-12 * l.amax());
    }

    #[test]
    fn adjoint_relates_left_and_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = k64();
        for _ in 0..10 {
            let c = random_scene(&mut rng, 25);
            let t = random_pose(&mut rng);
            let out = render(&c, &t, &k).unwrap();
            let w = weights(&mut rng, &k);
            let sg = splat_gradients(&c, &t, &k, &out, &w).unwrap();
            let l = pose_gradient(&c, &t, &sg, Side::Left).d_tau;
            let r = pose_gradient(&c, &t, &sg, Side::Right).d_tau;
            let mapped = t.adjoint().transpose() * l;
            assert!((mapped - r).norm() <= 1e-9 * r.norm());
        }
    }

    #[test]
    fn doubling_upstream_doubles_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = k64();
        let c = random_scene(&mut rng, 25);
        let t = random_pose(&mut rng);
        let out = render(&c, &t, &k).unwrap();
        let w = weights(&mut rng, &k);
        let w2 = w.scale(2.0);
        let a = splat_gradients(&c, &t, &k, &out, &w).unwrap();
        let b = splat_gradients(&c, &t, &k, &out, &w2).unwrap();
        for side in [Side::Left, Side::Right] {
            assert_eq!(
                pose_gradient(&c, &t, &a, side).d_tau * 2.0,
                pose_gradient(&c, &t, &b, side).d_tau
            );
        }
        let pa = param_gradients(&c, &t, &a, &ParamMask::default());
        let pb = param_gradients(&c, &t, &b, &ParamMask::default());
        for i in 0..c.len() {
            assert_eq!(pa.d_rot[i] * 2.0, pb.d_rot[i]);
            for ch in 0..3 {
                for kk in 0..SH_COEFFS {
                    assert_eq!(pa.d_sh[i][ch][kk] * 2.0, pb.d_sh[i][ch][kk]);
                }
            }
        }
    }

    #[test]
    fn absent_gaussians_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = k64();
        let mut c = random_scene(&mut rng, 10);
        // behind the camera, and far off to the side
        c.positions[3] = Vector3::new(0.0, 0.0, -10.0);
        c.positions[5] = Vector3::new(50.0, 0.0, 0.0);
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 4.0));
        let out = render(&c, &t, &k).unwrap();
        let w = weights(&mut rng, &k);
        let pg = appearance_gradients(&c, &t, &k, &out, &w, &ParamMask::default()).unwrap();
        for i in [3, 5] {
            assert_eq!(pg.d_rot[i], Vector4::zeros());
            assert_eq!(pg.d_sh[i], zero_sh());
        }
    }

    #[test]
    fn masked_off_parameters_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = k64();
        let c = random_scene(&mut rng, 10);
        let t = random_pose(&mut rng);
        let out = render(&c, &t, &k).unwrap();
        let w = weights(&mut rng, &k);
        let pg = appearance_gradients(&c, &t, &k, &out, &w, &ParamMask::none()).unwrap();
        assert!(pg.d_rot.iter().all(|v| *v == Vector4::zeros()));
        assert!(pg.d_sh.iter().all(|v| *v == zero_sh()));
    }

    #[test]
    fn dc_gradient_single_splat() {
        let mut c = GaussianCloud::empty();
        let mut sh = zero_sh();
        sh[1][0] = 0.3;
        c.push(
            Vector3::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::repeat(0.02f64.ln()),
            logit(0.7),
            sh,
        );
        let k = CameraIntrinsics::centered(50.0, 16);
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 3.0));
        let out = render(&c, &t, &k).unwrap();
        let mut dl = Image::zeros(16, 16, 3);
        dl.set(8, 8, 1, 0.5);
        let pg = appearance_gradients(&c, &t, &k, &out, &dl, &ParamMask::default()).unwrap();
        let e = out.tape.pixel(8 * 16 + 8)[0];
        assert!((pg.d_sh[0][1][0] - 0.5 * e.alpha * e.transmittance * SH_C0).abs() < 1e-15);
        assert_eq!(pg.d_sh[0][0][0], 0.0);
    }

    #[test]
    fn appearance_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = k64();
        let h = 1e-5;
        for _ in 0..3 {
            let c = random_scene(&mut rng, 20);
            let t = random_pose(&mut rng);
            let out = render(&c, &t, &k).unwrap();
            let w = weights(&mut rng, &k);
            let pg = appearance_gradients(&c, &t, &k, &out, &w, &ParamMask::default()).unwrap();
            for _ in 0..10 {
                let i = rng.random_range(0..c.len());
                let (ch, kk) = (rng.random_range(0..3), rng.random_range(0..SH_COEFFS));
                let (mut cp, mut cm) = (c.clone(), c.clone());
                cp.sh[i][ch][kk] += h;
                cm.sh[i][ch][kk] -= h;
                let fd = (linear_loss(&render(&cp, &t, &k).unwrap(), &w)
                    - linear_loss(&render(&cm, &t, &k).unwrap(), &w))
                    / (2.0 * h);
                assert!(
                    close(pg.d_sh[i][ch][kk], fd, 0.02, 1e-6),
                    "sh {}: {fd}",
                    pg.d_sh[i][ch][kk]
                );

                let a = rng.random_range(0..4);
                let (mut cp, mut cm) = (c.clone(), c.clone());
                cp.rotations[i][a] += h;
                cm.rotations[i][a] -= h;
                let fd = (linear_loss(&render(&cp, &t, &k).unwrap(), &w)
                    - linear_loss(&render(&cm, &t, &k).unwrap(), &w))
                    / (2.0 * h);
                assert!(close(pg.d_rot[i][a], fd, 0.02, 1e-3), "rot {}: {fd}", pg.d_rot[i][a]);
            }
        }
    }
}
