#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatpose"))
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn splatpose")
}

pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "splatpose {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Writes a model, intrinsics, ground-truth pose, a perturbed start pose and
/// the rendered target (`t.png`, `d.png`) into `dir`.
pub fn fixture(dir: &Path) {
    run_ok(dir, &["synth", "--seed", "5", "--out", "m.ply"]);
    write(
        dir,
        "k.json",
        r#"{"fx":100,"fy":100,"cx":39.5,"cy":39.5,"width":80,"height":80}"#,
    );
    write(
        dir,
        "gt.json",
        r#"{"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,4]}"#,
    );
    write(
        dir,
        "p0.json",
        r#"{"rotation":[0.9986295347545738,-0.052335956242943835,0,0.052335956242943835,0.9986295347545738,0,0,0,1],"translation":[0.04,-0.03,4.08]}"#,
    );
    write(
        dir,
        "cfg.json",
        r#"{"max_iters_camera":30,"max_iters_object":30,"max_iters_env":5,"env_adaptation":true}"#,
    );
    write(
        dir,
        "eval.json",
        r#"{"trials":2,"image_size":48,"scene":{"n_gaussians":60}}"#,
    );
    run_ok(
        dir,
        &[
            "render",
            "--model",
            "m.ply",
            "--pose",
            "gt.json",
            "--intrinsics",
            "k.json",
            "--out",
            "t.png",
            "--depth-out",
            "d.png",
        ],
    );
}

pub const REFINE_ARGS: &[&str] = &[
    "refine",
    "--model",
    "m.ply",
    "--image",
    "t.png",
    "--depth",
    "d.png",
    "--init-pose",
    "p0.json",
    "--intrinsics",
    "k.json",
    "--config",
    "cfg.json",
    "--out",
    "r.json",
    "--out-pose",
    "fp.json",
    "--out-render",
    "fr.png",
];

/// Every subcommand with the files it writes.
pub fn subcommands() -> Vec<(Vec<&'static str>, Vec<&'static str>)> {
    vec![
        (vec!["synth", "--seed", "9", "--out", "s.ply"], vec!["s.ply"]),
        (
            vec![
                "render",
                "--model",
                "m.ply",
                "--pose",
                "p0.json",
                "--intrinsics",
                "k.json",
                "--out",
                "o.png",
                "--depth-out",
                "od.png",
            ],
            vec!["o.png", "od.png"],
        ),
        (REFINE_ARGS.to_vec(), vec!["r.json", "fp.json", "fr.png"]),
        (
            vec!["gradcheck", "--scenes", "2", "--seed", "4", "--out", "g.json"],
            vec!["g.json"],
        ),
        (
            vec!["eval", "--spec", "eval.json", "--seed", "3", "--out", "e.json"],
            vec!["e.json"],
        ),
    ]
}

/// Runs each subcommand twice and reports the outputs whose bytes differ.
pub fn determinism_mismatches(dir: &Path) -> Vec<String> {
    let mut bad = Vec::new();
    for (args, files) in subcommands() {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let out = run_ok(dir, &args);
            let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect();
            runs.push((out.stdout, bytes));
        }
        if runs[0].0 != runs[1].0 {
            bad.push(format!("{} stdout", args[0]));
        }
        for (i, f) in files.iter().enumerate() {
            if runs[0].1[i] != runs[1].1[i] {
                bad.push(format!("{} {f}", args[0]));
            }
        }
    }
    bad
}
