//! Render-and-compare pose refinement.
//!
//! A refinement runs an optional mean-depth alignment, then a camera stage
//! (left perturbations), an object stage (right perturbations) and an
//! optional environment stage that also unlocks SH and rotation parameters.
//! Every step re-renders, evaluates the photometric loss, takes a gradient at
//! `tau = 0` and retracts onto SE(3).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backward::{param_gradients, pose_gradient, splat_gradients, BackwardError, Side};
use crate::camera::CameraIntrinsics;
use crate::image::{Image, Mask};
use crate::lie::{apply_left_perturbation, apply_right_perturbation, Pose, Tangent};
use crate::loss::{LossError, PhotometricLoss};
use crate::model::{GaussianCloud, ParamMask};
use crate::optim::{Optimizer, OptimizerKind};
use crate::render::{render, RenderError};
use crate::sh::SH_COEFFS;

/// Window (in evaluations) for the relative loss-change test.
pub const CONVERGENCE_WINDOW: usize = 5;
/// A stage stops as diverged once its loss exceeds this multiple of its first.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Losses at or below this count as an exact fit.
const LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refine config: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Backward(#[from] BackwardError),
    #[error("no pixel has valid observed depth, mask and rendered coverage")]
    NoValidDepth,
    #[error("input shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub lambda: f64,
    pub max_iters_camera: usize,
    pub max_iters_object: usize,
    pub max_iters_env: usize,
    /// Translation step scale; `None` means `1e-3 * cloud.extent()`.
    pub lr_rho: Option<f64>,
    pub lr_phi: f64,
    pub lr_sh: f64,
    pub lr_rot: f64,
    pub rel_tol: f64,
    pub env_adaptation: bool,
    /// Applied only when an observed depth map is supplied.
    pub depth_correction: bool,
    pub optimizer: OptimizerKind,
    pub param_mask: ParamMask,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            max_iters_camera: 100,
            max_iters_object: 100,
            max_iters_env: 100,
            lr_rho: None,
            lr_phi: 5e-3,
            lr_sh: 2.5e-3,
            lr_rot: 1e-3,
            rel_tol: 1e-5,
            env_adaptation: false,
            depth_correction: true,
            optimizer: OptimizerKind::default(),
            param_mask: ParamMask::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: String| Err(RefineError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        for (name, v) in [
            ("lr_phi", self.lr_phi),
            ("lr_sh", self.lr_sh),
            ("lr_rot", self.lr_rot),
            ("rel_tol", self.rel_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(v) = self.lr_rho {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("lr_rho must be positive, got {v}"));
            }
        }
        let m = &self.param_mask;
        if m.learn_xyz || m.learn_scale || m.learn_opacity {
            return bad("positions, scales and opacities cannot be learned".into());
        }
        self.optimizer.validate().map_err(RefineError::Config)
    }

    pub fn lr_rho_for(&self, cloud: &GaussianCloud) -> f64 {
        self.lr_rho.unwrap_or(1e-3 * cloud.extent())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Camera,
    Object,
    Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    /// Gradient steps taken.
    pub iterations: usize,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_pose: Pose,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub initial_pose: Pose,
    pub final_pose: Pose,
    /// Loss at every evaluation, all stages concatenated.
    pub loss_history: Vec<f64>,
    /// Indices into `loss_history` where each stage after the first starts.
    pub stage_boundaries: Vec<usize>,
    pub stages: Vec<StageReport>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Every stage met the tolerance and none diverged.
    pub converged: bool,
    pub iterations_used: usize,
    /// Pose after depth alignment, when it ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub depth_corrected_pose: Option<Pose>,
    /// Seconds; left out unless the caller asks for timings.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

pub struct RefineOutcome {
    pub report: RefineReport,
    /// The cloud the final pose was scored with (adapted when the
    /// environment stage ran).
    pub cloud: GaussianCloud,
}

/// Left (camera) or right (object) retraction `T <- exp(tau) T` / `T exp(tau)`.
pub fn retract(t: &Pose, tau: &Tangent, side: Side) -> Pose {
    match side {
        Side::Left => apply_left_perturbation(tau, t),
        Side::Right => apply_right_perturbation(tau, t),
    }
}

/// Shifts `t_z` so the mean rendered depth matches the mean observed depth
/// over pixels with valid observed depth, inside `mask`, and rendered
/// alpha above 0.5.
pub fn depth_z_correct(
    cloud: &GaussianCloud,
    t: &Pose,
    k: &CameraIntrinsics,
    observed_depth: &Image,
    mask: &Mask,
) -> Result<Pose, RefineError> {
    if observed_depth.width != k.width || observed_depth.height != k.height || observed_depth.channels != 1 {
        return Err(RefineError::Shape(format!(
            "depth map is {}x{}x{}, camera is {}x{}",
            observed_depth.width, observed_depth.height, observed_depth.channels, k.width, k.height
        )));
    }
    if mask.width != k.width || mask.height != k.height {
        return Err(RefineError::Shape("mask does not match the camera".into()));
    }
    let out = render(cloud, t, k)?;
    let (mut z1, mut z2, mut n) = (0.0, 0.0, 0usize);
    for p in 0..k.pixel_count() {
        let d = observed_depth.data[p];
        if d > 0.0 && mask.data[p] && out.alpha.data[p] > 0.5 {
            z1 += d;
            z2 += out.depth.data[p];
            n += 1;
        }
    }
    if n == 0 {
        return Err(RefineError::NoValidDepth);
    }
    let mut corrected = *t;
    corrected.translation.z += (z1 - z2) / n as f64;
    Ok(corrected)
}

struct Step {
    loss: f64,
    grad: Image,
    out: crate::render::RenderOutput,
}

fn evaluate(
    cloud: &GaussianCloud,
    t: &Pose,
    k: &CameraIntrinsics,
    loss: &PhotometricLoss,
) -> Result<Step, RefineError> {
    let out = render(cloud, t, k)?;
    let (l, grad) = loss.evaluate(&out.color)?;
    Ok(Step { loss: l, grad, out })
}

fn stage_side(stage: Stage) -> Side {
    match stage {
        Stage::Camera => Side::Left,
        Stage::Object | Stage::Environment => Side::Right,
    }
}

/// Runs one stage from `t0`. In the environment stage `cloud` is updated in
/// place and left at the best-loss parameters.
pub fn refine_stage(
    cloud: &mut GaussianCloud,
    t0: &Pose,
    k: &CameraIntrinsics,
    loss: &PhotometricLoss,
    cfg: &RefineConfig,
    stage: Stage,
) -> Result<StageReport, RefineError> {
    let max_iters = match stage {
        Stage::Camera => cfg.max_iters_camera,
        Stage::Object => cfg.max_iters_object,
        Stage::Environment => cfg.max_iters_env,
    };
    let side = stage_side(stage);
    let lr_rho = cfg.lr_rho_for(cloud);
    let adapt = stage == Stage::Environment;
    let mask = if adapt { cfg.param_mask } else { ParamMask::none() };
    let n = cloud.len();

    let mut pose_opt = Optimizer::new(cfg.optimizer, 6);
    let mut sh_opt = Optimizer::new(cfg.optimizer, if mask.learn_sh { n * 3 * SH_COEFFS } else { 0 });
    let mut rot_opt = Optimizer::new(cfg.optimizer, if mask.learn_rot { n * 4 } else { 0 });

    let mut t = *t0;
    let mut history = Vec::with_capacity(max_iters + 1);
    let mut best: Option<(f64, Pose, Option<GaussianCloud>)> = None;
    let mut status = StageStatus::MaxIterations;
    let mut iterations = 0;

    loop {
        let step = evaluate(cloud, &t, k, loss)?;
        history.push(step.loss);
        if best.as_ref().is_none_or(|b| step.loss < b.0) {
            best = Some((step.loss, t, adapt.then(|| cloud.clone())));
        }
        let first = history[0];
        if step.loss > DIVERGENCE_FACTOR * first && first > 0.0 {
            status = StageStatus::Diverged;
            break;
        }
        if step.loss <= LOSS_FLOOR {
            status = StageStatus::Converged;
            break;
        }
        if history.len() > CONVERGENCE_WINDOW {
            let prev = history[history.len() - 1 - CONVERGENCE_WINDOW];
            if (step.loss - prev).abs() / prev < cfg.rel_tol {
                status = StageStatus::Converged;
                break;
            }
        }
        if iterations == max_iters {
            break;
        }

        let sg = splat_gradients(cloud, &t, k, &step.out, &step.grad)?;
        let g = pose_gradient(cloud, &t, &sg, side).d_tau;
        let d = pose_opt.step(g.as_slice());
        let tau = Tangent::new(
            -lr_rho * nalgebra::Vector3::new(d[0], d[1], d[2]),
            -cfg.lr_phi * nalgebra::Vector3::new(d[3], d[4], d[5]),
        );
        if mask.learn_sh || mask.learn_rot {
            let pg = param_gradients(cloud, &t, &sg, &mask);
            if mask.learn_sh {
                let flat: Vec<f64> = pg.d_sh.iter().flat_map(|s| s.iter().flatten().copied()).collect();
                let d = sh_opt.step(&flat);
                for (i, sh) in cloud.sh.iter_mut().enumerate() {
                    for c in 0..3 {
                        for kk in 0..SH_COEFFS {
                            sh[c][kk] -= cfg.lr_sh * d[(i * 3 + c) * SH_COEFFS + kk];
                        }
                    }
                }
            }
            if mask.learn_rot {
                let flat: Vec<f64> = pg.d_rot.iter().flat_map(|q| q.iter().copied()).collect();
                let d = rot_opt.step(&flat);
                for (i, q) in cloud.rotations.iter_mut().enumerate() {
                    for a in 0..4 {
                        q[a] -= cfg.lr_rot * d[i * 4 + a];
                    }
                }
                cloud.normalize_rotations();
            }
        }
        t = retract(&t, &tau, side);
        iterations += 1;
    }

    let (best_loss, best_pose, best_cloud) = best.expect("at least one evaluation");
    if let Some(c) = best_cloud {
        *cloud = c;
    }
    Ok(StageReport {
        stage,
        status,
        iterations,
        initial_loss: history[0],
        best_loss,
        best_pose,
        loss_history: history,
    })
}

/// Full pipeline. The input cloud is never modified; the environment stage
/// works on a copy returned in the outcome.
pub fn refine(
    cloud: &GaussianCloud,
    t0: &Pose,
    target: &Image,
    mask: &Mask,
    k: &CameraIntrinsics,
    observed_depth: Option<&Image>,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    cfg.validate()?;
    k.validate().map_err(RenderError::from)?;
    if target.width != k.width || target.height != k.height {
        return Err(RefineError::Shape(format!(
            "image is {}x{}, camera is {}x{}",
            target.width, target.height, k.width, k.height
        )));
    }
    let loss = PhotometricLoss::new(target, mask, cfg.lambda)?;
    let mut work = cloud.clone();

    let mut t = *t0;
    let mut depth_corrected_pose = None;
    if let (true, Some(depth)) = (cfg.depth_correction, observed_depth) {
        t = depth_z_correct(&work, &t, k, depth, mask)?;
        depth_corrected_pose = Some(t);
    }

    let mut stages = vec![Stage::Camera, Stage::Object];
    if cfg.env_adaptation {
        stages.push(Stage::Environment);
    }
    let mut reports = Vec::new();
    let mut history = Vec::new();
    let mut boundaries = Vec::new();
    for stage in stages {
        if !history.is_empty() {
            boundaries.push(history.len());
        }
        let r = refine_stage(&mut work, &t, k, &loss, cfg, stage)?;
        t = r.best_pose;
        history.extend_from_slice(&r.loss_history);
        reports.push(r);
    }

    let final_loss = reports.last().map(|r| r.best_loss).unwrap_or(f64::NAN);
    let report = RefineReport {
        initial_pose: *t0,
        final_pose: t,
        initial_loss: history[0],
        final_loss,
        converged: reports.iter().all(|r| r.status == StageStatus::Converged),
        iterations_used: reports.iter().map(|r| r.iterations).sum(),
        loss_history: history,
        stage_boundaries: boundaries,
        stages: reports,
        depth_corrected_pose,
        wall_time: None,
    };
    Ok(RefineOutcome { report, cloud: work })
}
