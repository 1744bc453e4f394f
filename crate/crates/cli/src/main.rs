//! `splatpose` command-line tool.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use splatpose::gradcheck::{run_gradcheck, FdMode, GradcheckConfig};
use splatpose::harness::{make_synthetic_cloud, run_recovery_experiment, ExperimentSpec, SceneSpec};
use splatpose::lie::Pose;
use splatpose::refine::{refine, RefineConfig};
use splatpose::{render, CameraIntrinsics};

#[derive(Parser)]
#[command(name = "splatpose", version, about = "Gaussian-splatting pose refinement")]
struct Cli {
    /// Seed for commands that sample randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Progress on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FdArg {
    Plain,
    Frozen,
}

#[derive(Subcommand)]
enum Command {
    /// Render a model under a pose.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 16-bit depth PNG in millimeters.
        #[arg(long)]
        depth_out: Option<PathBuf>,
    },
    /// Refine an initial pose against an observed image.
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        init_pose: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_pose: Option<PathBuf>,
        #[arg(long)]
        out_render: Option<PathBuf>,
        /// Include wall-clock time in the report.
        #[arg(long)]
        timings: bool,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        #[arg(long)]
        abs_tolerance: Option<f64>,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, value_enum, default_value_t = FdArg::Frozen)]
        fd: FdArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic model.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch recovery experiment on synthetic scenes.
    Eval {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timings: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = io::read_json(path)?;
    k.validate().with_context(|| format!("in {}", path.display()))?;
    Ok(k)
}

fn run(cli: Cli) -> Result<bool> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Render {
            model,
            pose,
            intrinsics,
            out,
            depth_out,
        } => {
            let cloud = io::load_model(&model)?;
            let pose: Pose = io::read_json(&pose)?;
            let k = load_intrinsics(&intrinsics)?;
            let r = render(&cloud, &pose, &k)?;
            io::write_color(&out, &r.color)?;
            if let Some(p) = depth_out {
                io::write_depth(&p, &r.depth)?;
            }
            if verbose {
                eprintln!("rendered {} splats into {}", r.splats.len(), out.display());
            }
            Ok(true)
        }
        Command::Refine {
            model,
            image,
            mask,
            depth,
            init_pose,
            intrinsics,
            config,
            out,
            out_pose,
            out_render,
            timings,
        } => {
            let start = Instant::now();
            let cloud = io::load_model(&model)?;
            let target = io::read_color(&image)?;
            let k = load_intrinsics(&intrinsics)?;
            let mask = match mask {
                Some(p) => io::read_mask(&p)?,
                None => splatpose::Mask::full(target.width, target.height),
            };
            if mask.width != target.width || mask.height != target.height {
                bail!("mask and image sizes differ");
            }
            let depth = depth.map(|p| io::read_depth(&p)).transpose()?;
            let t0: Pose = io::read_json(&init_pose)?;
            let cfg: RefineConfig = match config {
                Some(p) => io::read_json(&p)?,
                None => RefineConfig::default(),
            };
            let outcome = refine(&cloud, &t0, &target, &mask, &k, depth.as_ref(), &cfg)?;
            let mut report = outcome.report;
            if timings {
                report.wall_time = Some(start.elapsed().as_secs_f64());
            }
            if verbose {
                for s in &report.stages {
                    eprintln!(
                        "{:?}: {:?} after {} steps, loss {:.6} -> {:.6}",
                        s.stage, s.status, s.iterations, s.initial_loss, s.best_loss
                    );
                }
            }
            io::write_json(&out, &report)?;
            if let Some(p) = out_pose {
                io::write_json(&p, &report.final_pose)?;
            }
            if let Some(p) = out_render {
                io::write_color(&p, &render(&outcome.cloud, &report.final_pose, &k)?.color)?;
            }
            Ok(true)
        }
        Command::Gradcheck {
            model,
            tolerance,
            abs_tolerance,
            scenes,
            fd,
            out,
        } => {
            let cloud = model.map(|p| io::load_model(&p)).transpose()?;
            let cfg = GradcheckConfig {
                seed: cli.seed.unwrap_or(0),
                scenes,
                tolerance,
                abs_tolerance,
                fd_mode: match fd {
                    FdArg::Plain => FdMode::Plain,
                    FdArg::Frozen => FdMode::Frozen,
                },
                ..Default::default()
            };
            let report = run_gradcheck(cloud.as_ref(), &cfg).map_err(anyhow::Error::msg)?;
            for b in &report.blocks {
                println!(
                    "{:<12} samples {:>4}  max_rel {:.3e}  max_abs {:.3e}  {}",
                    b.name,
                    b.samples,
                    b.max_rel_error,
                    b.max_abs_error,
                    if b.passed { "pass" } else { "FAIL" }
                );
            }
            println!("gradcheck {}", if report.passed { "passed" } else { "FAILED" });
            if let Some(p) = out {
                io::write_json(&p, &report)?;
            }
            Ok(report.passed)
        }
        Command::Synth { spec, out } => {
            let mut s: SceneSpec = match spec {
                Some(p) => io::read_json(&p)?,
                None => SceneSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            s.validate().map_err(anyhow::Error::msg)?;
            let cloud = make_synthetic_cloud(&s);
            let bytes = splatpose::ply::encode_ply(&cloud)?;
            io::write_bytes(&out, &bytes)?;
            if verbose {
                eprintln!("wrote {} Gaussians to {}", cloud.len(), out.display());
            }
            Ok(true)
        }
        Command::Eval {
            spec,
            config,
            trials,
            out,
            timings,
        } => {
            let mut s: ExperimentSpec = match spec {
                Some(p) => io::read_json(&p)?,
                None => ExperimentSpec::default(),
            };
            if let Some(n) = trials {
                s.trials = n;
            }
            if let Some(seed) = cli.seed {
                s.scene.seed = seed;
            }
            let cfg: RefineConfig = match config {
                Some(p) => io::read_json(&p)?,
                None => RefineConfig::default(),
            };
            let report = run_recovery_experiment(&s, &cfg, cli.jobs, timings).map_err(anyhow::Error::msg)?;
            let a = &report.aggregates;
            println!(
                "success {}/{} ({:.1}%), median rotation {:.4} deg, median translation {:.5}, median add {:.5}",
                a.successes,
                a.trials,
                100.0 * a.success_rate,
                a.median_rotation_deg,
                a.median_translation,
                a.median_add
            );
            io::write_json(&out, &report)?;
            Ok(true)
        }
    }
}
