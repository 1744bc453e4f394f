//! Finite-difference self-check of every analytic gradient block.
//!
//! Each scene renders a cloud under a base pose, scores it against a target
//! rendered from a nearby pose, and compares analytic gradients of the full
//! photometric loss with central differences. Blocks: compositing, loss,
//! left and right pose tangents, SH coefficients and rotations.

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backward::{composite_backward, param_gradients, pose_gradient, splat_gradients, Side};
use crate::camera::CameraIntrinsics;
use crate::harness::{make_synthetic_cloud, sample_perturbation, trial_seed, ColorMode, SceneSpec};
use crate::image::{Image, Mask};
use crate::lie::{apply_left_perturbation, apply_right_perturbation, so3_exp, Pose, Tangent};
use crate::loss::PhotometricLoss;
use crate::model::{GaussianCloud, ParamMask};
use crate::render::{preprocess, render, RenderOutput, ALPHA_MAX};
use crate::sh::SH_COEFFS;

/// How the finite-difference side re-evaluates the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdMode {
    /// Full re-render; picks up contributors crossing the alpha cutoff.
    Plain,
    /// Re-render with each pixel's contributor list and order taken from the
    /// base render.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub scenes: usize,
    pub n_gaussians: usize,
    pub image_size: usize,
    /// Relative tolerance.
    pub tolerance: f64,
    /// Absolute tolerance; `None` means `tolerance * 5e-5`.
    pub abs_tolerance: Option<f64>,
    pub step: f64,
    pub fd_mode: FdMode,
    pub lambda: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 20,
            n_gaussians: 100,
            image_size: 128,
            tolerance: 0.02,
            abs_tolerance: None,
            step: 1e-4,
            fd_mode: FdMode::Frozen,
            lambda: 0.2,
        }
    }
}

impl GradcheckConfig {
    pub fn abs_tol(&self) -> f64 {
        self.abs_tolerance.unwrap_or(self.tolerance * 5e-5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub samples: usize,
    pub failures: usize,
    /// Largest relative error among samples above the absolute tolerance.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

struct Block {
    name: &'static str,
    samples: usize,
    failures: usize,
    max_rel: f64,
    max_abs: f64,
}

impl Block {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            samples: 0,
            failures: 0,
            max_rel: 0.0,
            max_abs: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, fd: f64, rel_tol: f64, abs_tol: f64) {
        self.samples += 1;
        let abs = (analytic - fd).abs();
        let rel = if abs == 0.0 {
            0.0
        } else {
            abs / analytic.abs().max(fd.abs())
        };
        self.max_abs = self.max_abs.max(abs);
        if abs > abs_tol {
            self.max_rel = self.max_rel.max(rel);
            if rel > rel_tol || !rel.is_finite() {
                self.failures += 1;
            }
        }
    }

    fn finish(self) -> BlockReport {
        BlockReport {
            name: self.name.into(),
            samples: self.samples,
            failures: self.failures,
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            passed: self.failures == 0 && self.samples > 0,
        }
    }
}

/// Renders `cloud` at `t` reusing `reference`'s per-pixel contributor lists.
/// Alpha is recomputed without the low-alpha cutoff, so the result is a
/// smooth function of the pose and parameters near the reference.
pub fn render_frozen(
    cloud: &GaussianCloud,
    t: &Pose,
    k: &CameraIntrinsics,
    reference: &RenderOutput,
) -> Result<Image, String> {
    let splats = preprocess(cloud, t, k).map_err(|e| e.to_string())?;
    let mut slot = vec![usize::MAX; cloud.len()];
    for (i, s) in splats.iter().enumerate() {
        slot[s.gaussian] = i;
    }
    let mut img = Image::zeros(k.width, k.height, 3);
    for y in 0..k.height {
        for x in 0..k.width {
            let mut tr = 1.0;
            let mut col = [0.0; 3];
            for e in reference.tape.pixel(y * k.width + x) {
                let g = reference.gaussian_of(e);
                let s = splats
                    .get(slot[g])
                    .ok_or_else(|| format!("Gaussian {g} left the view under the perturbation"))?;
                let (dx, dy) = (x as f64 - s.center.x, y as f64 - s.center.y);
                let power =
                    -0.5 * (s.conic[(0, 0)] * dx * dx + 2.0 * s.conic[(0, 1)] * dx * dy + s.conic[(1, 1)] * dy * dy);
                let a = (s.opacity * power.exp()).min(ALPHA_MAX);
                for c in 0..3 {
                    col[c] += a * tr * s.color[c];
                }
                tr *= 1.0 - a;
            }
            for c in 0..3 {
                img.set(x, y, c, col[c].clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

struct Scene {
    cloud: GaussianCloud,
    pose: Pose,
    k: CameraIntrinsics,
    loss: PhotometricLoss,
}

fn build_scene(model: Option<&GaussianCloud>, cfg: &GradcheckConfig, index: usize) -> Result<Scene, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, index));
    let cloud = match model {
        Some(m) => m.clone(),
        None => make_synthetic_cloud(&SceneSpec {
            n_gaussians: cfg.n_gaussians,
            extent: 1.0,
            color_mode: ColorMode::FullSh,
            opacity_range: [0.3, 0.95],
            seed: rng.random(),
        }),
    };
    let extent = cloud.extent();
    let center = cloud.centroid();
    let rot = so3_exp(&Vector3::from_fn(|_, _| {
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
    }));
    let pose = Pose::new(rot, Vector3::new(0.0, 0.0, 4.0 * extent) - rot * center);
    let k = CameraIntrinsics::centered(1.25 * cfg.image_size as f64, cfg.image_size);
    let near = apply_right_perturbation(&sample_perturbation(3.0, 0.03, extent, &mut rng), &pose);
    let target = render(&cloud, &near, &k).map_err(|e| e.to_string())?.color;
    let loss = PhotometricLoss::new(&target, &Mask::full(k.width, k.height), cfg.lambda).map_err(|e| e.to_string())?;
    Ok(Scene { cloud, pose, k, loss })
}

/// Runs the suite on `model` (posed randomly per scene) or on synthetic
/// clouds when no model is given.
pub fn run_gradcheck(model: Option<&GaussianCloud>, cfg: &GradcheckConfig) -> Result<GradcheckReport, String> {
    if cfg.scenes == 0 {
        return Err("scenes must be at least 1".into());
    }
    if !(cfg.step > 0.0) {
        return Err("step must be positive".into());
    }
    let (rt, at) = (cfg.tolerance, cfg.abs_tol());
    let mut blocks = [
        Block::new("compositing"),
        Block::new("loss"),
        Block::new("pose_left"),
        Block::new("pose_right"),
        Block::new("sh"),
        Block::new("rot"),
    ];
    let h = cfg.step;

    for index in 0..cfg.scenes {
        let sc = build_scene(model, cfg, index)?;
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed ^ 0xA5A5, index));
        let base = render(&sc.cloud, &sc.pose, &sc.k).map_err(|e| e.to_string())?;
        let (_, dl) = sc.loss.evaluate(&base.color).map_err(|e| e.to_string())?;

        // compositing: closed-form pixel value with one alpha or color nudged
        let eg = composite_backward(&base, &dl).map_err(|e| e.to_string())?;
        let multi: Vec<usize> = (0..base.tape.ranges.len())
            .filter(|&p| base.tape.ranges[p].len() >= 2)
            .collect();
        for _ in 0..multi.len().min(10) {
            let p = multi[rng.random_range(0..multi.len())];
            let entries = base.tape.pixel(p);
            let alphas: Vec<f64> = entries.iter().map(|e| e.alpha).collect();
            let cols: Vec<[f64; 3]> = entries.iter().map(|e| base.splats[e.splat as usize].color).collect();
            let g: [f64; 3] = std::array::from_fn(|c| dl.data[p * 3 + c]);
            let f = |a: &[f64], cs: &[[f64; 3]]| -> f64 {
                let mut tr = 1.0;
                let mut px = [0.0; 3];
                for (ai, ci) in a.iter().zip(cs) {
                    for c in 0..3 {
                        px[c] += ci[c] * ai * tr;
                    }
                    tr *= 1.0 - ai;
                }
                (0..3).map(|c| g[c] * px[c].min(1.0)).sum()
            };
            let i = rng.random_range(0..entries.len());
            let start = base.tape.ranges[p].start as usize;
            let (mut ap, mut am) = (alphas.clone(), alphas.clone());
            ap[i] += h;
            am[i] -= h;
            let fd = (f(&ap, &cols) - f(&am, &cols)) / (2.0 * h);
            blocks[0].record(eg[start + i].d_alpha, fd, rt, at * 1e-3);
            let c = rng.random_range(0..3);
            let (mut cp, mut cm) = (cols.clone(), cols.clone());
            cp[i][c] += h;
            cm[i][c] -= h;
            let fd = (f(&alphas, &cp) - f(&alphas, &cm)) / (2.0 * h);
            blocks[0].record(eg[start + i].d_color[c], fd, rt, at * 1e-3);
        }

        // loss: perturb single prediction values
        for _ in 0..10 {
            let idx = rng.random_range(0..base.color.data.len());
            let (mut pp, mut pm) = (base.color.clone(), base.color.clone());
            pp.data[idx] += h;
            pm.data[idx] -= h;
            let fd = (sc.loss.value(&pp).map_err(|e| e.to_string())?
                - sc.loss.value(&pm).map_err(|e| e.to_string())?)
                / (2.0 * h);
            blocks[1].record(dl.data[idx], fd, rt, at * 1e-3);
        }

        let eval = |cloud: &GaussianCloud, pose: &Pose| -> Result<f64, String> {
            let img = match cfg.fd_mode {
                FdMode::Plain => render(cloud, pose, &sc.k).map_err(|e| e.to_string())?.color,
                FdMode::Frozen => render_frozen(cloud, pose, &sc.k, &base)?,
            };
            sc.loss.value(&img).map_err(|e| e.to_string())
        };

        let sg = splat_gradients(&sc.cloud, &sc.pose, &sc.k, &base, &dl).map_err(|e| e.to_string())?;
        for (bi, side) in [(2, Side::Left), (3, Side::Right)] {
            let an = pose_gradient(&sc.cloud, &sc.pose, &sg, side).d_tau;
            for a in 0..6 {
                let mut e = Vector6::zeros();
                e[a] = h;
                let at_pose = |v: Vector6<f64>| {
                    let tau = Tangent::from_vector(&v);
                    match side {
                        Side::Left => apply_left_perturbation(&tau, &sc.pose),
                        Side::Right => apply_right_perturbation(&tau, &sc.pose),
                    }
                };
                let fd = (eval(&sc.cloud, &at_pose(e))? - eval(&sc.cloud, &at_pose(-e))?) / (2.0 * h);
                blocks[bi].record(an[a], fd, rt, at);
            }
        }

        let pg = param_gradients(&sc.cloud, &sc.pose, &sg, &ParamMask::default());
        let visible: Vec<usize> = sg.iter().map(|g| g.gaussian).collect();
        if visible.is_empty() {
            continue;
        }
        for _ in 0..8 {
            let i = visible[rng.random_range(0..visible.len())];
            let (c, kk) = (rng.random_range(0..3), rng.random_range(0..SH_COEFFS));
            let (mut cp, mut cm) = (sc.cloud.clone(), sc.cloud.clone());
            cp.sh[i][c][kk] += h;
            cm.sh[i][c][kk] -= h;
            let fd = (eval(&cp, &sc.pose)? - eval(&cm, &sc.pose)?) / (2.0 * h);
            blocks[4].record(pg.d_sh[i][c][kk], fd, rt, at);
        }
        for _ in 0..8 {
            let i = visible[rng.random_range(0..visible.len())];
            let a = rng.random_range(0..4);
            let (mut cp, mut cm) = (sc.cloud.clone(), sc.cloud.clone());
            cp.rotations[i][a] += h;
            cm.rotations[i][a] -= h;
            let fd = (eval(&cp, &sc.pose)? - eval(&cm, &sc.pose)?) / (2.0 * h);
            blocks[5].record(pg.d_rot[i][a], fd, rt, at);
        }
    }

    let blocks: Vec<BlockReport> = blocks.into_iter().map(Block::finish).collect();
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradcheckReport {
        config: cfg.clone(),
        blocks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradcheckConfig {
        GradcheckConfig {
            scenes: 2,
            n_gaussians: 30,
            image_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn default_blocks_pass() {
        let r = run_gradcheck(None, &small()).unwrap();
        assert!(r.passed, "{:#?}", r.blocks);
        assert_eq!(r.blocks.len(), 6);
    }

    #[test]
    fn zero_tolerance_fails() {
        let cfg = GradcheckConfig {
            tolerance: 0.0,
            ..small()
        };
        assert!(!run_gradcheck(None, &cfg).unwrap().passed);
    }

    #[test]
    fn repeatable() {
        assert_eq!(
            run_gradcheck(None, &small()).unwrap(),
            run_gradcheck(None, &small()).unwrap()
        );
    }

    #[test]
    fn frozen_render_matches_plain_at_the_base_pose() {
        let cfg = small();
        let sc = build_scene(None, &cfg, 0).unwrap();
        let base = render(&sc.cloud, &sc.pose, &sc.k).unwrap();
        let frozen = render_frozen(&sc.cloud, &sc.pose, &sc.k, &base).unwrap();
        let worst = frozen
            .data
            .iter()
            .zip(&base.color.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }
}
