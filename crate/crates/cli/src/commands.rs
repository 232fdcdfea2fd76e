use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rlqr::biasshift::RegTarget;
use rlqr::criticfit::{apply_critic_fit, fit_critic_last_layer, write_critic_report, write_critic_trajectory, CriticFitConfig, CriticFitProblem};
use rlqr::env::{linearize_upright, rollout, wrap_angle, PendulumEnv, State};
use rlqr::lastfit::{apply_fit, fit_exact, fit_relaxed, write_fit_history, write_fit_report, FitProblem, FitResult};
use rlqr::lqr::{lqr_optimal_cost, solve_care, LinearSystem};
use rlqr::net::{read_network, write_network};
use rlqr::rng::{counter_rng, Stream};
use rlqr::td3::{train as run_td3, write_metrics_csv, MetricsRow, PendulumTask};
use rlqr::{Lqr, Network};

use crate::config::RunConfig;
use crate::manifest::{Manifest, MANIFEST_NAME};
use crate::CliError;

/// Final-angle bound for a trial to count as stabilized, rad.
pub const STABILIZED_THETA: f64 = 0.05;

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_at(path))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

fn write_net(path: &Path, net: &Network) -> Result<(), CliError> {
    let mut f = create(path)?;
    write_network(&mut f, net)?;
    f.flush().map_err(io_at(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Network, CliError> {
    let f = File::open(path).map_err(io_at(path))?;
    Ok(read_network(BufReader::new(f))?)
}

/// Reads a pendulum actor: two inputs, one output.
fn read_actor(path: &Path) -> Result<Network, CliError> {
    let net = read_checkpoint(path)?;
    if net.input_dim() != 2 || net.output_dim() != 1 {
        return Err(CliError::Run(rlqr::Error::Format(format!(
            "{}: expected a 2-input, 1-output actor, got {}x{}",
            path.display(),
            net.input_dim(),
            net.output_dim()
        ))));
    }
    Ok(net)
}

pub fn plant(cfg: &RunConfig) -> Result<(LinearSystem<f64>, Lqr), CliError> {
    let sys = linearize_upright(&cfg.env)?;
    let sol = solve_care(&sys)?;
    Ok((sys, sol))
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_NAME: &str = "metrics.csv";

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("actor_{step}.net"))
}

pub fn train(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(usize)) -> Result<TrainSummary, CliError> {
    create_dir(&out.join("checkpoints"))?;
    let (_, sol) = plant(cfg)?;
    let mut task = PendulumTask {
        env: PendulumEnv::new(cfg.env.clone())?,
        train_reset: cfg.train_reset,
        eval_reset: cfg.eval_reset,
    };
    let target = RegTarget {
        k: sol.k / cfg.env.torque_max,
        enabled: true,
    };
    let interval = cfg.td3.eval_interval;
    let result = run_td3(&mut task, &cfg.td3, &cfg.bias, &target, cfg.seed, |ev| {
        if ev.step % interval == 0 {
            progress(ev.step);
        }
    })
    .map_err(CliError::from_config)?;

    let mut artifacts = vec![METRICS_NAME.to_string()];
    let metrics_path = out.join(METRICS_NAME);
    let mut f = create(&metrics_path)?;
    write_metrics_csv(&mut f, &result.metrics).map_err(io_at(&metrics_path))?;
    f.flush().map_err(io_at(&metrics_path))?;

    let mut checkpoints = Vec::new();
    for (step, actor) in &result.checkpoints {
        let path = checkpoint_path(out, *step);
        write_net(&path, actor)?;
        artifacts.push(format!("checkpoints/{}", file_name(&path)));
        checkpoints.push(path);
    }
    for (name, net) in [("actor_final.net", &result.agent.actor), ("critic_final.net", &result.agent.critic1)] {
        write_net(&out.join(name), net)?;
        artifacts.push(name.to_string());
    }
    Manifest {
        command: "train",
        config: cfg,
        meta: Vec::new(),
        artifacts,
    }
    .write(&out.join(MANIFEST_NAME))?;
    Ok(TrainSummary {
        metrics: result.metrics,
        checkpoints,
    })
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitMode {
    /// Equality-constrained fit to the LQR gain.
    Exact,
    /// Penalty rounds until the closed loop is stable.
    Relaxed,
    /// Last layer of a Swish critic to the LQR cost.
    Critic,
}

impl FitMode {
    fn name(self) -> &'static str {
        match self {
            FitMode::Exact => "exact",
            FitMode::Relaxed => "relaxed",
            FitMode::Critic => "critic",
        }
    }
}

#[derive(Debug, Clone)]
pub enum FitSummary {
    Actor(FitResult<f64>),
    Critic { residual: f64, max_block_eig: f64, iterations: usize },
}

pub const FITTED_ACTOR: &str = "actor_fitted.net";
pub const FITTED_CRITIC: &str = "critic_fitted.net";

pub fn fit(cfg: &RunConfig, checkpoint: &Path, mode: FitMode, out: &Path) -> Result<FitSummary, CliError> {
    let (sys, sol) = plant(cfg)?;
    create_dir(out)?;
    let (summary, artifacts) = match mode {
        FitMode::Exact | FitMode::Relaxed => {
            let actor = read_actor(checkpoint)?;
            let p = FitProblem::from_actor(&actor, &sol.k, cfg.bias.m, &cfg.fit)?;
            let r = match mode {
                FitMode::Exact => fit_exact(&p, Some(&sys))?,
                _ => fit_relaxed(&p, &sys)?,
            };
            write_net(&out.join(FITTED_ACTOR), &apply_fit(&actor, &r)?)?;
            let report = out.join("fit_report.csv");
            let mut f = create(&report)?;
            write_fit_report(&mut f, &p, &r).map_err(io_at(&report))?;
            f.flush().map_err(io_at(&report))?;
            let history = out.join("fit_history.csv");
            let mut f = create(&history)?;
            write_fit_history(&mut f, &r.history).map_err(io_at(&history))?;
            f.flush().map_err(io_at(&history))?;
            (FitSummary::Actor(r), vec![FITTED_ACTOR, "fit_report.csv", "fit_history.csv"])
        }
        FitMode::Critic => {
            let critic = read_checkpoint(checkpoint)?;
            let (p, _) =
                CriticFitProblem::from_critic(&critic, cfg.bias.m, sol.p.clone(), sol.k.clone(), cfg.env.exit_reward, cfg.critic_nu)?;
            let r = fit_critic_last_layer(&p, &CriticFitConfig::default())?;
            write_net(&out.join(FITTED_CRITIC), &apply_critic_fit(&critic, &r)?)?;
            let report = out.join("critic_fit_report.csv");
            let mut f = create(&report)?;
            write_critic_report(&mut f, &r.report).map_err(io_at(&report))?;
            f.flush().map_err(io_at(&report))?;
            let traj = out.join("critic_fit_trajectory.csv");
            let mut f = create(&traj)?;
            write_critic_trajectory(&mut f, &r.report).map_err(io_at(&traj))?;
            f.flush().map_err(io_at(&traj))?;
            let summary = FitSummary::Critic {
                residual: r.report.residuals.max(),
                max_block_eig: r.report.max_block_eig,
                iterations: r.report.iterations,
            };
            (summary, vec![FITTED_CRITIC, "critic_fit_report.csv", "critic_fit_trajectory.csv"])
        }
    };
    Manifest {
        command: "fit",
        config: cfg,
        meta: vec![("checkpoint", checkpoint.display().to_string()), ("mode", mode.name().into())],
        artifacts: artifacts.into_iter().map(String::from).collect(),
    }
    .write(&out.join(MANIFEST_NAME))?;
    Ok(summary)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub theta0: f64,
    /// Quadratic cost accumulated over the rollout.
    pub cost: f64,
    /// `x0^T P x0`.
    pub lqr_cost: f64,
    pub final_state: State<f64>,
}

impl Trial {
    pub fn stabilized(&self) -> bool {
        wrap_angle(self.final_state.theta).abs() < STABILIZED_THETA
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub trials: Vec<Trial>,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub lqr_cost_mean: f64,
}

impl EvalSummary {
    pub fn stabilized(&self) -> usize {
        self.trials.iter().filter(|t| t.stabilized()).count()
    }
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, trials: usize, x0_range: (f64, f64), duration: f64, out: &Path) -> Result<EvalSummary, CliError> {
    if !(x0_range.0 <= x0_range.1) {
        return Err(CliError::Usage(format!("--x0-range: low {} above high {}", x0_range.0, x0_range.1)));
    }
    if !(duration >= 0.0) {
        return Err(CliError::Usage(format!("--duration: {duration} is negative")));
    }
    let actor = read_actor(checkpoint)?;
    let (_, sol) = plant(cfg)?;
    create_dir(out)?;
    let steps = (duration / cfg.env.dt).round() as usize;
    // Counter 0 of the evaluation stream; training evaluations use counters from 1.
    let mut rng = counter_rng(cfg.seed, Stream::Evaluation, 0);
    let mut rows = Vec::with_capacity(trials);
    for _ in 0..trials {
        let theta0 = if x0_range.0 == x0_range.1 { x0_range.0 } else { rng.random_range(x0_range.0..x0_range.1) };
        let x0 = State::new(theta0, 0.0);
        let traj = rollout(&cfg.env, x0, steps, |s| actor.eval(&s.to_vec()).map_or(f64::NAN, |u| u[0]));
        rows.push(Trial {
            theta0,
            cost: traj.quadratic_cost(&cfg.env),
            lqr_cost: lqr_optimal_cost(&sol.p, &x0.to_vec()),
            final_state: traj.final_state(),
        });
    }
    let n = rows.len() as f64;
    let cost_mean = rows.iter().map(|t| t.cost).sum::<f64>() / n;
    let cost_std = (rows.iter().map(|t| (t.cost - cost_mean).powi(2)).sum::<f64>() / n).sqrt();
    let lqr_cost_mean = rows.iter().map(|t| t.lqr_cost).sum::<f64>() / n;
    let summary = EvalSummary {
        trials: rows,
        cost_mean,
        cost_std,
        lqr_cost_mean,
    };

    let path = out.join("eval_trials.csv");
    let mut f = create(&path)?;
    (|| -> std::io::Result<()> {
        writeln!(f, "trial,theta0,cost,lqr_cost,final_theta,final_theta_dot,stabilized")?;
        for (i, t) in summary.trials.iter().enumerate() {
            writeln!(
                f,
                "{i},{},{},{},{},{},{}",
                t.theta0,
                t.cost,
                t.lqr_cost,
                t.final_state.theta,
                t.final_state.theta_dot,
                u8::from(t.stabilized())
            )?;
        }
        f.flush()
    })()
    .map_err(io_at(&path))?;

    let path = out.join("eval_summary.csv");
    let mut f = create(&path)?;
    (|| -> std::io::Result<()> {
        writeln!(f, "trials,cost_mean,cost_std,lqr_cost_mean,stabilized")?;
        if trials > 0 {
            writeln!(
                f,
                "{trials},{},{},{},{}",
                summary.cost_mean,
                summary.cost_std,
                summary.lqr_cost_mean,
                summary.stabilized()
            )?;
        }
        f.flush()
    })()
    .map_err(io_at(&path))?;

    Manifest {
        command: "eval",
        config: cfg,
        meta: vec![
            ("checkpoint", checkpoint.display().to_string()),
            ("trials", trials.to_string()),
            ("x0_range", format!("{},{}", x0_range.0, x0_range.1)),
            ("duration", duration.to_string()),
        ],
        artifacts: vec!["eval_trials.csv".into(), "eval_summary.csv".into()],
    }
    .write(&out.join(MANIFEST_NAME))?;
    Ok(summary)
}

// ---------------------------------------------------------------- heatmap

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub theta: (f64, f64),
    pub theta_dot: (f64, f64),
    pub n_theta: usize,
    pub n_theta_dot: usize,
}

impl Grid {
    fn axis(range: (f64, f64), n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (range.0 + range.1)];
        }
        (0..n).map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64).collect()
    }

    /// Row-major points, `theta` outer.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let td = Self::axis(self.theta_dot, self.n_theta_dot);
        Self::axis(self.theta, self.n_theta)
            .into_iter()
            .flat_map(|t| td.iter().map(move |&d| (t, d)))
            .collect()
    }
}

/// `out.csv` -> `out_lqr.csv`.
pub fn lqr_companion(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}_lqr.{}", ext.to_string_lossy()),
        None => format!("{stem}_lqr"),
    };
    path.with_file_name(name)
}

/// `out.csv` -> `out.manifest.txt`.
pub fn heatmap_manifest(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{MANIFEST_NAME}"))
}

fn write_grid(path: &Path, rows: &[(f64, f64, f64)]) -> Result<(), CliError> {
    let mut f = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(f, "theta,theta_dot,u")?;
        for (t, d, u) in rows {
            writeln!(f, "{t},{d},{u}")?;
        }
        f.flush()
    })()
    .map_err(io_at(path))
}

/// Writes the policy grid and its LQR companion; returns the number of data rows.
pub fn heatmap(cfg: &RunConfig, checkpoint: &Path, grid: &Grid, out: &Path) -> Result<usize, CliError> {
    if grid.n_theta == 0 || grid.n_theta_dot == 0 {
        return Err(CliError::Usage("--resolution must be at least 1".into()));
    }
    let actor = read_actor(checkpoint)?;
    let (_, sol) = plant(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let points = grid.points();
    let clip = |u: f64| cfg.env.clip_torque(u);
    let mut policy = Vec::with_capacity(points.len());
    let mut lqr = Vec::with_capacity(points.len());
    for &(t, d) in &points {
        let x = DVector::from_vec(vec![t, d]);
        policy.push((t, d, clip(actor.eval(&x)?[0])));
        lqr.push((t, d, clip(-(&sol.k * &x)[0])));
    }
    let companion = lqr_companion(out);
    write_grid(out, &policy)?;
    write_grid(&companion, &lqr)?;
    Manifest {
        command: "heatmap",
        config: cfg,
        meta: vec![
            ("checkpoint", checkpoint.display().to_string()),
            ("theta", format!("{},{}", grid.theta.0, grid.theta.1)),
            ("theta_dot", format!("{},{}", grid.theta_dot.0, grid.theta_dot.1)),
            ("resolution", format!("{}x{}", grid.n_theta, grid.n_theta_dot)),
        ],
        artifacts: vec![file_name(out), file_name(&companion)],
    }
    .write(&heatmap_manifest(out))?;
    Ok(points.len())
}

// ---------------------------------------------------------------- lqr

pub struct LqrReport {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// Eigenvalues of `A - B K`.
    pub closed_loop: Vec<Complex<f64>>,
}

pub fn lqr(cfg: &RunConfig) -> Result<LqrReport, CliError> {
    let (sys, sol) = plant(cfg)?;
    let acl = &sys.a - &sys.b * &sol.k;
    let mut closed_loop: Vec<Complex<f64>> = acl.complex_eigenvalues().iter().copied().collect();
    closed_loop.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(LqrReport {
        k: sol.k,
        p: sol.p,
        closed_loop,
    })
}
