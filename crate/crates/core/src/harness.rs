//! Synthetic scenes, pose perturbations, pose-error metrics and batched
//! recovery experiments.

use std::time::Instant;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, UnitBall};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::image::{Image, Mask};
use crate::lie::{apply_right_perturbation, rotation_angle_between, Pose, Tangent};
use crate::model::{logit, quaternion_to_matrix, zero_sh, GaussianCloud};
use crate::refine::{refine, RefineConfig};
use crate::render::render;
use crate::sh::SH_C0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    DcOnly,
    FullSh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_gaussians: usize,
    /// Object bounding radius.
    pub extent: f64,
    pub color_mode: ColorMode,
    pub opacity_range: [f64; 2],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_gaussians: 200,
            extent: 1.0,
            color_mode: ColorMode::DcOnly,
            opacity_range: [0.5, 0.95],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_gaussians == 0 {
            return Err("n_gaussians must be at least 1".into());
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(format!("extent must be positive, got {}", self.extent));
        }
        let [lo, hi] = self.opacity_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(format!("opacity_range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"));
        }
        Ok(())
    }
}

fn random_unit_quaternion(rng: &mut impl Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = q.norm();
        if n > 1e-6 {
            return q / n;
        }
    }
}

fn random_unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Random cloud: centers uniform in the extent ball, uniform rotations,
/// per-axis scales log-uniform in `[extent/50, extent/10]`.
pub fn make_synthetic_cloud(spec: &SceneSpec) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;
    let (s_lo, s_hi) = ((e / 50.0).ln(), (e / 10.0).ln());
    let [o_lo, o_hi] = spec.opacity_range;
    let mut cloud = GaussianCloud::empty();
    for _ in 0..spec.n_gaussians {
        let p: [f64; 3] = UnitBall.sample(&mut rng);
        let q = random_unit_quaternion(&mut rng);
        let s = Vector3::from_fn(|_, _| rng.random_range(s_lo..=s_hi));
        let o = if o_lo < o_hi {
            rng.random_range(o_lo..o_hi)
        } else {
            o_lo
        };
        let mut sh = zero_sh();
        for ch in sh.iter_mut() {
            ch[0] = (rng.random_range(0.1..0.9) - 0.5) / SH_C0;
            if spec.color_mode == ColorMode::FullSh {
                for v in ch.iter_mut().skip(1) {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        cloud.push(Vector3::from(p) * e, q, s, logit(o), sh);
    }
    cloud
}

/// Random tangent with rotation angle uniform in `(0, max_rot_deg]` about a
/// uniform axis and translation uniform in the ball of radius
/// `max_trans_frac * extent`.
pub fn sample_perturbation(max_rot_deg: f64, max_trans_frac: f64, extent: f64, rng: &mut impl Rng) -> Tangent {
    let axis = random_unit_vector(rng);
    let u: f64 = rng.random();
    let angle = max_rot_deg.to_radians() * (1.0 - u);
    let b: [f64; 3] = UnitBall.sample(rng);
    Tangent::new(Vector3::from(b) * (max_trans_frac * extent), axis * angle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
    pub add: f64,
    pub add_s: f64,
}

pub fn pose_error(t_est: &Pose, t_gt: &Pose, model_points: &[Vector3<f64>]) -> PoseError {
    assert!(!model_points.is_empty(), "pose_error needs at least one model point");
    let est: Vec<_> = model_points.iter().map(|p| t_est.transform_point(p)).collect();
    let gt: Vec<_> = model_points.iter().map(|p| t_gt.transform_point(p)).collect();
    let m = model_points.len() as f64;
    let add = est.iter().zip(&gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / m;
    let add_s = est
        .iter()
        .map(|a| gt.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / m;
    PoseError {
        rotation_deg: rotation_angle_between(&t_est.rotation, &t_gt.rotation).to_degrees(),
        translation: (t_est.translation - t_gt.translation).norm(),
        add,
        add_s,
    }
}

/// Photometric disturbances applied to the target image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    /// Global multiplicative gain.
    pub gain: f64,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Occluding rectangle `[x0, y0, x1, y1]` in image fractions, filled gray.
    pub occlusion: Option<[f64; 4]>,
    /// Box-blur radius in pixels (motion-blur stand-in).
    pub blur_radius: usize,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            gain: 1.0,
            noise_sigma: 0.0,
            occlusion: None,
            blur_radius: 0,
        }
    }
}

impl Corruption {
    pub fn apply(&self, img: &Image, rng: &mut impl Rng) -> Image {
        let mut out = img.scale(self.gain);
        if self.blur_radius > 0 {
            out = box_blur(&out, self.blur_radius);
        }
        if let Some([fx0, fy0, fx1, fy1]) = self.occlusion {
            let (w, h) = (out.width as f64, out.height as f64);
            let x0 = (fx0 * w).round().clamp(0.0, w) as usize;
            let x1 = (fx1 * w).round().clamp(0.0, w) as usize;
            let y0 = (fy0 * h).round().clamp(0.0, h) as usize;
            let y1 = (fy1 * h).round().clamp(0.0, h) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..out.channels {
                        out.set(x, y, c, 0.5);
                    }
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            for v in out.data.iter_mut() {
                *v += n.sample(rng);
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

fn box_blur(img: &Image, r: usize) -> Image {
    let mut out = Image::zeros(img.width, img.height, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            let (ya, yb) = (y.saturating_sub(r), (y + r).min(img.height - 1));
            let (xa, xb) = (x.saturating_sub(r), (x + r).min(img.width - 1));
            let n = ((yb - ya + 1) * (xb - xa + 1)) as f64;
            for c in 0..img.channels {
                let mut s = 0.0;
                for yy in ya..=yb {
                    for xx in xa..=xb {
                        s += img.get(xx, yy, c);
                    }
                }
                out.set(x, y, c, s / n);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scene: SceneSpec,
    pub trials: usize,
    pub max_rot_deg: f64,
    pub max_trans_frac: f64,
    /// Success iff ADD < diameter_frac * diameter.
    pub diameter_frac: f64,
    pub image_size: usize,
    /// Focal length in pixels; defaults to `1.25 * image_size`.
    pub focal: Option<f64>,
    /// Camera distance in multiples of the extent.
    pub camera_distance: f64,
    pub corruption: Corruption,
    /// Supply the ground-truth depth map to the refiner.
    pub with_depth: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            trials: 50,
            max_rot_deg: 10.0,
            max_trans_frac: 0.1,
            diameter_frac: 0.1,
            image_size: 256,
            focal: None,
            camera_distance: 4.0,
            corruption: Corruption::default(),
            with_depth: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), String> {
        self.scene.validate()?;
        if self.trials == 0 {
            return Err("trials must be at least 1".into());
        }
        if !(self.max_rot_deg >= 0.0 && self.max_trans_frac >= 0.0) {
            return Err("perturbation bounds must be non-negative".into());
        }
        if !(self.diameter_frac > 0.0) {
            return Err("diameter_frac must be positive".into());
        }
        if self.image_size == 0 {
            return Err("image_size must be at least 1".into());
        }
        if !(self.camera_distance > 1.0) {
            return Err("camera_distance must exceed 1 extent".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.focal.unwrap_or(1.25 * self.image_size as f64), self.image_size)
    }
}

/// One synthetic recovery problem.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub cloud: GaussianCloud,
    pub k: CameraIntrinsics,
    pub gt_pose: Pose,
    pub initial_pose: Pose,
    pub target: Image,
    pub mask: Mask,
    pub depth: Option<Image>,
}

pub fn trial_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds trial `index`'s scene, ground truth, target and start pose.
pub fn setup_trial(spec: &ExperimentSpec, index: usize) -> Result<TrialSetup, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(spec.scene.seed, index));
    let scene = SceneSpec {
        seed: rng.next_u64(),
        ..spec.scene.clone()
    };
    let cloud = make_synthetic_cloud(&scene);
    let k = spec.intrinsics();
    let q = random_unit_quaternion(&mut rng);
    let gt_pose = Pose::new(
        quaternion_to_matrix(&q),
        Vector3::new(0.0, 0.0, spec.camera_distance * spec.scene.extent),
    );
    let out = render(&cloud, &gt_pose, &k).map_err(|e| e.to_string())?;
    let target = spec.corruption.apply(&out.color, &mut rng);
    let depth = spec.with_depth.then(|| {
        let mut d = out.depth.clone();
        for (v, a) in d.data.iter_mut().zip(&out.alpha.data) {
            if *a <= 0.5 {
                *v = 0.0;
            }
        }
        d
    });
    let tau = sample_perturbation(spec.max_rot_deg, spec.max_trans_frac, spec.scene.extent, &mut rng);
    let initial_pose = apply_right_perturbation(&tau, &gt_pose);
    Ok(TrialSetup {
        cloud,
        k,
        gt_pose,
        initial_pose,
        target,
        mask: Mask::full(k.width, k.height),
        depth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub seed: u64,
    pub diameter: f64,
    pub initial_error: PoseError,
    pub final_error: Option<PoseError>,
    pub initial_success: bool,
    pub success: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Positions, scales and opacities bit-equal before and after.
    pub frozen_intact: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub initial_success_rate: f64,
    pub failed_runs: usize,
    pub mean_rotation_deg: f64,
    pub median_rotation_deg: f64,
    pub mean_translation: f64,
    pub median_translation: f64,
    pub mean_add: f64,
    pub median_add: f64,
    pub mean_final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub mean_trial_seconds: f64,
    pub max_trial_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub config: RefineConfig,
    pub aggregates: Aggregates,
    pub trials: Vec<TrialResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings: Option<Timings>,
}

fn frozen_equal(a: &GaussianCloud, b: &GaussianCloud) -> bool {
    a.positions == b.positions && a.log_scales == b.log_scales && a.opacity_logits == b.opacity_logits
}

pub fn run_trial(spec: &ExperimentSpec, cfg: &RefineConfig, index: usize, timed: bool) -> TrialResult {
    let start = Instant::now();
    let seed = trial_seed(spec.scene.seed, index);
    let setup = match setup_trial(spec, index) {
        Ok(s) => s,
        Err(e) => {
            let zero = PoseError {
                rotation_deg: 0.0,
                translation: 0.0,
                add: 0.0,
                add_s: 0.0,
            };
            return TrialResult {
                index,
                seed,
                diameter: 0.0,
                initial_error: zero,
                final_error: None,
                initial_success: false,
                success: false,
                initial_loss: None,
                final_loss: None,
                iterations: 0,
                converged: false,
                frozen_intact: true,
                error: Some(e),
                wall_time: timed.then(|| start.elapsed().as_secs_f64()),
            };
        }
    };
    let points = &setup.cloud.positions;
    let diameter = setup.cloud.diameter();
    let threshold = spec.diameter_frac * diameter;
    let initial_error = pose_error(&setup.initial_pose, &setup.gt_pose, points);
    let before = setup.cloud.clone();
    let outcome = refine(
        &setup.cloud,
        &setup.initial_pose,
        &setup.target,
        &setup.mask,
        &setup.k,
        setup.depth.as_ref(),
        cfg,
    );
    let mut r = TrialResult {
        index,
        seed,
        diameter,
        initial_error,
        final_error: None,
        initial_success: initial_error.add < threshold,
        success: false,
        initial_loss: None,
        final_loss: None,
        iterations: 0,
        converged: false,
        frozen_intact: frozen_equal(&before, &setup.cloud),
        error: None,
        wall_time: None,
    };
    match outcome {
        Ok(o) => {
            let fe = pose_error(&o.report.final_pose, &setup.gt_pose, points);
            r.final_error = Some(fe);
            r.success = fe.add < threshold;
            r.initial_loss = Some(o.report.initial_loss);
            r.final_loss = Some(o.report.final_loss);
            r.iterations = o.report.iterations_used;
            r.converged = o.report.converged;
            r.frozen_intact &= frozen_equal(&before, &o.cloud);
        }
        Err(e) => r.error = Some(e.to_string()),
    }
    r.wall_time = timed.then(|| start.elapsed().as_secs_f64());
    r
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn aggregate(trials: &[TrialResult]) -> Aggregates {
    let n = trials.len();
    let finals: Vec<PoseError> = trials.iter().filter_map(|t| t.final_error).collect();
    let rot: Vec<f64> = finals.iter().map(|e| e.rotation_deg).collect();
    let tr: Vec<f64> = finals.iter().map(|e| e.translation).collect();
    let add: Vec<f64> = finals.iter().map(|e| e.add).collect();
    let losses: Vec<f64> = trials.iter().filter_map(|t| t.final_loss).collect();
    let successes = trials.iter().filter(|t| t.success).count();
    Aggregates {
        trials: n,
        successes,
        success_rate: successes as f64 / n as f64,
        initial_success_rate: trials.iter().filter(|t| t.initial_success).count() as f64 / n as f64,
        failed_runs: trials.iter().filter(|t| t.error.is_some()).count(),
        mean_rotation_deg: mean(&rot),
        median_rotation_deg: median(rot),
        mean_translation: mean(&tr),
        median_translation: median(tr),
        mean_add: mean(&add),
        median_add: median(add),
        mean_final_loss: mean(&losses),
    }
}

/// Runs `spec.trials` independent trials on `jobs` threads (0 = all cores).
/// The report is independent of `jobs`; timings are recorded only when
/// `timed` is set.
pub fn run_recovery_experiment(
    spec: &ExperimentSpec,
    cfg: &RefineConfig,
    jobs: usize,
    timed: bool,
) -> Result<ExperimentReport, String> {
    spec.validate()?;
    cfg.validate().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| e.to_string())?;
    let trials: Vec<TrialResult> = pool.install(|| {
        (0..spec.trials)
            .into_par_iter()
            .map(|i| run_trial(spec, cfg, i, timed))
            .collect()
    });
    let timings = timed.then(|| {
        let per: Vec<f64> = trials.iter().filter_map(|t| t.wall_time).collect();
        Timings {
            total_seconds: start.elapsed().as_secs_f64(),
            mean_trial_seconds: mean(&per),
            max_trial_seconds: per.iter().copied().fold(0.0, f64::max),
        }
    });
    Ok(ExperimentReport {
        spec: spec.clone(),
        config: cfg.clone(),
        aggregates: aggregate(&trials),
        trials,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::se3_exp;

    #[test]
    fn cloud_is_deterministic_and_bounded() {
        let spec = SceneSpec {
            seed: 42,
            ..Default::default()
        };
        let a = make_synthetic_cloud(&spec);
        let b = make_synthetic_cloud(&spec);
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        for i in 0..a.len() {
            assert!(a.positions[i].norm() <= 1.0);
            for s in a.log_scales[i].iter() {
                let s = s.exp();
                assert!((1.0 / 50.0 - 1e-12..=1.0 / 10.0 + 1e-12).contains(&s));
            }
            let o = a.opacity(i);
            assert!((0.5 - 1e-12..0.95 + 1e-12).contains(&o));
        }
        let c = make_synthetic_cloud(&SceneSpec { seed: 43, ..spec });
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn single_gaussian_cloud_renders() {
        let spec = SceneSpec {
            n_gaussians: 1,
            ..Default::default()
        };
        let c = make_synthetic_cloud(&spec);
        let k = CameraIntrinsics::centered(160.0, 128);
        let out = render(&c, &Pose::from_translation(Vector3::new(0.0, 0.0, 4.0)), &k).unwrap();
        assert!(out.alpha.data.iter().any(|&a| a > 0.0));
    }

    #[test]
    fn perturbation_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let t = sample_perturbation(10.0, 0.1, 2.0, &mut rng);
            assert!(t.phi.norm() <= 10f64.to_radians() + 1e-15);
            assert!(t.phi.norm() > 0.0);
            assert!(t.rho.norm() <= 0.2);
        }
        let t = sample_perturbation(1e-12, 1e-12, 1.0, &mut rng);
        assert!(t.to_vector().norm() < 1e-12);
    }

    #[test]
    fn perturbation_angle_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bins = 20;
        let n = 10_000;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let t = sample_perturbation(10.0, 0.1, 1.0, &mut rng);
            let u = t.phi.norm() / 10f64.to_radians();
            counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let expect = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 99th percentile of chi-squared with 19 degrees of freedom
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }

    #[test]
    fn pose_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let t = se3_exp(&Tangent::new(Vector3::new(0.1, 0.2, 3.0), Vector3::new(0.3, 0.1, -0.2)));
        let e = pose_error(&t, &t, &pts);
        assert_eq!(
            e,
            PoseError {
                rotation_deg: 0.0,
                translation: 0.0,
                add: 0.0,
                add_s: 0.0
            }
        );

        let d = Vector3::new(0.3, -0.4, 0.0);
        let mut shifted = t;
        shifted.translation += d;
        let e = pose_error(&shifted, &t, &pts);
        assert!((e.add - 0.5).abs() < 1e-12);
        assert_eq!(e.rotation_deg, 0.0);

        for _ in 0..20 {
            let a = se3_exp(&Tangent::from_vector(&nalgebra::Vector6::from_fn(|_, _| {
                rng.random_range(-1.0..1.0)
            })));
            let b = se3_exp(&Tangent::from_vector(&nalgebra::Vector6::from_fn(|_, _| {
                rng.random_range(-1.0..1.0)
            })));
            let e = pose_error(&a, &b, &pts);
            let mut add = 0.0;
            for p in &pts {
                add += (a.rotation * p + a.translation - (b.rotation * p + b.translation)).norm();
            }
            add /= pts.len() as f64;
            assert!((e.add - add).abs() < 1e-9);
            assert!(e.add_s <= e.add);
        }
    }

    #[test]
    fn corruption_gain_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Image::filled(4, 4, 3, 0.8);
        let c = Corruption {
            gain: 0.5,
            ..Default::default()
        };
        assert!(c.apply(&img, &mut rng).data.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let c = Corruption {
            gain: 2.0,
            ..Default::default()
        };
        assert!(c.apply(&img, &mut rng).data.iter().all(|&v| v == 1.0));
        let c = Corruption {
            occlusion: Some([0.0, 0.0, 0.5, 0.5]),
            ..Default::default()
        };
        let o = c.apply(&img, &mut rng);
        assert_eq!(o.get(0, 0, 0), 0.5);
        assert_eq!(o.get(3, 3, 0), 0.8);
    }

    #[test]
    fn box_blur_preserves_constants() {
        let img = Image::filled(7, 5, 3, 0.3);
        let b = box_blur(&img, 2);
        assert!(b.data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn zero_perturbation_experiment_succeeds() {
        let spec = ExperimentSpec {
            scene: SceneSpec {
                n_gaussians: 30,
                ..Default::default()
            },
            trials: 2,
            max_rot_deg: 0.0,
            max_trans_frac: 0.0,
            image_size: 64,
            ..Default::default()
        };
        let r = run_recovery_experiment(&spec, &RefineConfig::default(), 1, false).unwrap();
        assert_eq!(r.aggregates.success_rate, 1.0);
        assert!(r.trials.iter().all(|t| t.frozen_intact));
        let again = run_recovery_experiment(&spec, &RefineConfig::default(), 2, false).unwrap();
        assert_eq!(r, again);
    }
}
