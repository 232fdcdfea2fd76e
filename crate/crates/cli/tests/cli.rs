use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use rlqr::biasshift::{initialize_biases, BiasShiftConfig};
use rlqr::env::{linearize_upright, PendulumParams};
use rlqr::lqr::solve_care;
use rlqr::net::{write_network, Activation, Layer, NetworkParams};
use rlqr::rng::{stream_rng, Stream};

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn rlqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlqr")).args(args).env_remove("RLQR_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rlqr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn save(path: &Path, net: &NetworkParams<f64>) {
    let mut f = fs::File::create(path).unwrap();
    write_network(&mut f, net).unwrap();
}

/// 64x32 bias-shifted actor as it looks before training.
fn fresh_actor(seed: u64) -> NetworkParams<f64> {
    let mut rng = stream_rng(seed, Stream::ActorInit);
    let acts = [Activation::Relu, Activation::Relu, Activation::Tanh];
    let mut net = NetworkParams::init_uniform(&[2, 64, 32, 1], &acts, DVector::from_element(1, 0.8), &mut rng).unwrap();
    initialize_biases(&mut net, &BiasShiftConfig::default(), 2, &mut rng).unwrap();
    net
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const SMALL: &[&str] = &["--hidden", "16,8", "--batch_size", "32", "--warmup", "200", "--eval_episodes", "1"];

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = scratch("train");
    let run = |name: &str| {
        let out = dir.join(name);
        let mut args = vec!["train", "--out", s(&out), "--variant", "full_bias_shift", "--total_steps", "10000", "--seed", "1"];
        args.extend_from_slice(&["--checkpoint_steps", "0,5000"]);
        args.extend_from_slice(SMALL);
        ok(&args);
        out
    };
    let a = run("a");
    for f in ["metrics.csv", "manifest.txt", "actor_final.net", "critic_final.net", "checkpoints/actor_0.net", "checkpoints/actor_5000.net"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert!(read_csv(&a.join("metrics.csv")).len() >= 10);
    let b = run("b");
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());

    // The manifest alone reproduces the run.
    let c = dir.join("c");
    ok(&["train", "--config", s(&a.join("manifest.txt")), "--out", s(&c)]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn invalid_variant_is_a_usage_error() {
    let dir = scratch("bad_variant");
    let out = rlqr(&["train", "--out", s(&dir), "--variant", "turbo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));

    let cfg = dir.join("cfg.txt");
    fs::write(&cfg, "gamma=1.5\n").unwrap();
    let out = rlqr(&["train", "--config", s(&cfg), "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));

    assert_eq!(rlqr(&["train"]).status.code(), Some(2));
    assert_eq!(rlqr(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = scratch("seed_env");
    let cfg = dir.join("cfg.txt");
    fs::write(&cfg, "# comment\nseed=1\nmeta.anything=ignored\ntotal_steps=300\nhidden=4,4\nbatch_size=8\nwarmup=50\neval_interval=100\neval_episodes=1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rlqr"))
        .args(["train", "--config", s(&cfg), "--out", s(&dir.join("run"))])
        .env("RLQR_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.join("run/manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "seed=5"));
    assert!(manifest.lines().any(|l| l == "hidden=4,4"));
}

#[test]
fn fit_modes_on_untrained_checkpoint() {
    let dir = scratch("fit");
    let ckpt = dir.join("actor_0.net");
    save(&ckpt, &fresh_actor(3));

    let stdout = ok(&["fit", "--checkpoint", s(&ckpt), "--mode", "relaxed", "--out", s(&dir.join("relaxed"))]);
    assert!(stdout.contains("stable") && !stdout.contains("unstable"), "{stdout}");
    let history = read_csv(&dir.join("relaxed/fit_history.csv"));
    assert!(!history.is_empty() && history.len() <= 20);

    ok(&["fit", "--checkpoint", s(&ckpt), "--mode", "exact", "--out", s(&dir.join("exact"))]);
    let fitted = dir.join("exact/actor_fitted.net");
    ok(&["fit", "--checkpoint", s(&fitted), "--mode", "exact", "--out", s(&dir.join("again"))]);
    let report = fs::read_to_string(dir.join("again/fit_report.csv")).unwrap();
    for key in ["weight_delta", "bias_delta", "gain_error"] {
        let v: f64 = report.lines().find_map(|l| l.strip_prefix(&format!("{key},"))).unwrap().parse().unwrap();
        assert!(v < 1e-10, "{key} {v}");
    }
    for f in ["manifest.txt", "fit_report.csv", "fit_history.csv", "actor_fitted.net"] {
        assert!(dir.join("exact").join(f).is_file());
    }
}

#[test]
fn collapsed_region_is_infeasible() {
    let dir = scratch("collapsed");
    let mut net = fresh_actor(4);
    // Second input column a multiple of the first: the region map has rank 1.
    let col = net.layers[0].weight.column(0).into_owned();
    net.layers[0].weight.set_column(1, &(col * -0.5));
    let ckpt = dir.join("collapsed.net");
    save(&ckpt, &net);
    for (mode, msg) in [("exact", "infeasible"), ("relaxed", "no stabilizing fit")] {
        let out = rlqr(&["fit", "--checkpoint", s(&ckpt), "--mode", mode, "--out", s(&dir.join(mode))]);
        assert_eq!(out.status.code(), Some(1), "{mode}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(msg), "{mode}");
    }
    let out = rlqr(&["fit", "--checkpoint", s(&dir.join("missing.net")), "--mode", "exact", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_summary_and_empty_run() {
    let dir = scratch("eval");
    let ckpt = dir.join("actor.net");
    save(&ckpt, &fresh_actor(5));
    ok(&["fit", "--checkpoint", s(&ckpt), "--mode", "relaxed", "--out", s(&dir.join("fit"))]);
    let fitted = dir.join("fit/actor_fitted.net");

    let stdout = ok(&["eval", "--checkpoint", s(&fitted), "--trials", "4", "--x0-range", "-0.1,0.1", "--duration", "3", "--out", s(&dir.join("e"))]);
    assert!(stdout.contains('±'));
    let trials = read_csv(&dir.join("e/eval_trials.csv"));
    assert_eq!(trials.len(), 4);
    assert!(trials.iter().all(|t| t[1].abs() <= 0.1));
    let summary = read_csv(&dir.join("e/eval_summary.csv"));
    let n = trials.len() as f64;
    let mean = trials.iter().map(|t| t[2]).sum::<f64>() / n;
    assert_eq!(summary.len(), 1);
    assert!((summary[0][1] - mean).abs() < 1e-12);

    ok(&["eval", "--checkpoint", s(&fitted), "--trials", "0", "--out", s(&dir.join("none"))]);
    let text = fs::read_to_string(dir.join("none/eval_summary.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(dir.join("none/manifest.txt").is_file());
}

#[test]
fn heatmap_rows_and_zero_policy() {
    let dir = scratch("heatmap");
    let acts = [Activation::Relu, Activation::Tanh];
    let layers = vec![
        Layer { weight: DMatrix::zeros(8, 2), bias: DVector::zeros(8), activation: acts[0] },
        Layer { weight: DMatrix::zeros(1, 8), bias: DVector::zeros(1), activation: acts[1] },
    ];
    let zero = NetworkParams::new(layers, DVector::from_element(1, 0.8)).unwrap();
    let ckpt = dir.join("zero.net");
    save(&ckpt, &zero);
    let out = dir.join("zero.csv");
    ok(&["heatmap", "--checkpoint", s(&ckpt), "--resolution", "101", "--out", s(&out)]);
    let rows = read_csv(&out);
    assert_eq!(rows.len(), 10201);
    assert!(rows.iter().all(|r| r[2] == 0.0));
    assert_eq!(read_csv(&dir.join("zero_lqr.csv")).len(), 10201);
    assert!(dir.join("zero.manifest.txt").is_file());
    // Corners of the default grid.
    assert_eq!((rows[0][0], rows[0][1]), (-std::f64::consts::PI, -8.0));
    assert_eq!((rows[10200][0], rows[10200][1]), (std::f64::consts::PI, 8.0));

    ok(&["heatmap", "--checkpoint", s(&ckpt), "--resolution", "3x5", "--theta", "-1,1", "--out", s(&dir.join("small.csv"))]);
    assert_eq!(read_csv(&dir.join("small.csv")).len(), 15);
}

#[test]
fn lqr_companion_is_clipped_feedback() {
    let dir = scratch("companion");
    let ckpt = dir.join("actor.net");
    save(&ckpt, &fresh_actor(6));
    let out = dir.join("h.csv");
    ok(&["heatmap", "--checkpoint", s(&ckpt), "--resolution", "21", "--theta", "-0.5,0.5", "--theta-dot", "-2,2", "--out", s(&out)]);
    let p = PendulumParams::<f64>::default();
    let k = solve_care(&linearize_upright(&p).unwrap()).unwrap().k;
    for r in read_csv(&dir.join("h_lqr.csv")) {
        let u = (-(k[(0, 0)] * r[0] + k[(0, 1)] * r[1])).clamp(-0.8, 0.8);
        assert!((r[2] - u).abs() < 1e-12);
    }
    for r in read_csv(&out) {
        assert!(r[2].abs() <= 0.8);
    }
}

#[test]
fn lqr_prints_gain_and_stable_eigenvalues() {
    let stdout = ok(&["lqr"]);
    assert!(stdout.contains("33.10") && stdout.contains("10.08"), "{stdout}");
    let eigs: Vec<f64> = stdout
        .lines()
        .skip_while(|l| !l.starts_with("closed-loop"))
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(eigs.len(), 2);
    assert!(eigs.iter().all(|&e| e < 0.0));

    let stdout = ok(&["lqr", "--r", "0.01"]);
    assert!(!stdout.contains("33.10"));
}
