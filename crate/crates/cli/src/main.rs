use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlqr_cli::commands::{self, FitMode, FitSummary, Grid};
use rlqr_cli::config::RunConfig;
use rlqr_cli::{split_overrides, CliError};

/// Train, fit and evaluate bias-shifted pendulum policies.
///
/// Any config key can be overridden as `--key value` (e.g. `--seed 3 --hidden 64,32`).
#[derive(Parser)]
#[command(name = "rlqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run TD3 and write metrics, checkpoints and a manifest.
    Train {
        /// key=value config file (a manifest works too).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refit the last layer of a checkpoint.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: FitMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a checkpoint from random initial angles.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Initial angle range `low,high`, rad.
        #[arg(long, default_value = "-0.4,0.4", allow_hyphen_values = true)]
        x0_range: String,
        /// Rollout length, s.
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the policy on a state grid.
    Heatmap {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `low,high`, rad.
        #[arg(long, default_value = "-3.141592653589793,3.141592653589793", allow_hyphen_values = true)]
        theta: String,
        /// `low,high`, rad/s.
        #[arg(long, default_value = "-8,8", allow_hyphen_values = true)]
        theta_dot: String,
        /// `N` or `NxM` (theta x theta_dot).
        #[arg(long, default_value = "101")]
        resolution: String,
        /// Output CSV; the LQR companion goes next to it as `<stem>_lqr.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the LQR gain, cost matrix and closed-loop eigenvalues.
    Lqr {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_range(flag: &str, s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Usage(format!("--{flag}: expected `low,high`, got `{s}`"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn parse_resolution(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--resolution: expected `N` or `NxM`, got `{s}`"));
    let (a, b) = s.split_once('x').unwrap_or((s, s));
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            let total = cfg.td3.total_steps;
            let s = commands::train(&cfg, &out, |step| eprintln!("step {step}/{total}"))?;
            if let Some(last) = s.metrics.last() {
                println!(
                    "step {}: eval return {:.3} ± {:.3}, min |b| {:.4}",
                    last.step, last.eval_return_mean, last.eval_return_std, last.min_abs_bias
                );
            }
            println!("wrote {} metrics rows, {} checkpoints to {}", s.metrics.len(), s.checkpoints.len(), out.display());
        }
        Command::Fit { config, checkpoint, mode, out } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            match commands::fit(&cfg, &checkpoint, mode, &out)? {
                FitSummary::Actor(r) => {
                    println!("gain error {:.3e}, offset {:.3e}, rounds {}, nu {}", r.gain_error, r.offset.amax(), r.rounds, r.nu_final);
                    let eig = r.max_real_eig.map_or(String::from("n/a"), |e| format!("{e:.4}"));
                    println!("{} (max Re eig {eig})", if r.stable { "stable" } else { "unstable" });
                }
                FitSummary::Critic { residual, max_block_eig, iterations } => {
                    println!("max residual {residual:.3e}, block max eig {max_block_eig:.3e}, {iterations} iterations");
                }
            }
        }
        Command::Eval { config, checkpoint, trials, x0_range, duration, out } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            let range = parse_range("x0-range", &x0_range)?;
            let s = commands::evaluate(&cfg, &checkpoint, trials, range, duration, &out)?;
            if trials > 0 {
                println!("cost {:.4} ± {:.4} (LQR {:.4})", s.cost_mean, s.cost_std, s.lqr_cost_mean);
                println!("stabilized {}/{trials}", s.stabilized());
            } else {
                println!("no trials");
            }
        }
        Command::Heatmap { config, checkpoint, theta, theta_dot, resolution, out } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            let (n_theta, n_theta_dot) = parse_resolution(&resolution)?;
            let grid = Grid {
                theta: parse_range("theta", &theta)?,
                theta_dot: parse_range("theta-dot", &theta_dot)?,
                n_theta,
                n_theta_dot,
            };
            let rows = commands::heatmap(&cfg, &checkpoint, &grid, &out)?;
            println!("wrote {rows} rows to {} and {}", out.display(), commands::lqr_companion(&out).display());
        }
        Command::Lqr { config } => {
            let cfg = RunConfig::load(config.as_deref(), overrides)?;
            let r = commands::lqr(&cfg)?;
            print!("K ={}P ={}", r.k, r.p);
            println!("closed-loop eigenvalues:");
            for e in &r.closed_loop {
                println!("  {:.6} {:+.6}i", e.re, e.im);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
