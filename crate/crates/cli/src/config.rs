//! Flat `key=value` run configuration.
//!
//! One namespace covers the plant, TD3, bias shifting and both fits. Files are
//! UTF-8, one `key=value` per line, `#` starts a comment, and `meta.*` keys are
//! skipped so a manifest can be fed back in as a config.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use rlqr::biasshift::{BiasShiftConfig, ShiftRule};
use rlqr::env::{PendulumParams, ResetMode};
use rlqr::lastfit::FitConfig;
use rlqr::td3::{OptimizerKind, TD3Config};

use crate::CliError;

pub const SEED_ENV: &str = "RLQR_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: PendulumParams<f64>,
    pub train_reset: ResetMode,
    pub eval_reset: ResetMode,
    pub td3: TD3Config,
    pub bias: BiasShiftConfig,
    pub fit: FitConfig,
    /// Convexity weight of the critic fit.
    pub critic_nu: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = PendulumParams::default();
        Self {
            td3: TD3Config::for_action_bound(env.torque_max),
            env,
            train_reset: ResetMode::Bottom,
            eval_reset: ResetMode::Bottom,
            bias: BiasShiftConfig::default(),
            fit: FitConfig::default(),
            critic_nu: 1.0,
            seed: 0,
        }
    }
}

/// Every accepted key, in manifest order.
pub const KEYS: &[&str] = &[
    "seed",
    // plant
    "mass",
    "length",
    "damping",
    "torque_max",
    "dt",
    "gravity",
    "episode_len",
    "exit_reward",
    "exit_theta",
    "exit_theta_dot",
    "exit_terminates",
    "velocity_abort",
    "q_theta",
    "q_theta_dot",
    "r",
    "train_reset",
    "eval_reset",
    // td3
    "variant",
    "total_steps",
    "delay",
    "gamma",
    "tau",
    "explore_noise",
    "smooth_noise",
    "noise_clip",
    "batch_size",
    "actor_lr",
    "critic_lr",
    "optimizer",
    "hidden",
    "dropout",
    "warmup",
    "buffer_capacity",
    "eval_interval",
    "eval_episodes",
    "checkpoint_steps",
    "critic_bias_shift",
    // bias shifting
    "m",
    "c_b",
    "c_w",
    "alpha",
    "lambda_lin",
    "lambda_k",
    "lambda_bz",
    "shift_rule",
    // fits
    "nu_k",
    "nu_growth",
    "max_rounds",
    "epsilon",
    "critic_nu",
];

pub fn is_key(key: &str) -> bool {
    KEYS.contains(&key)
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, CliError>
where
    V::Err: Display,
{
    value.trim().parse().map_err(|e: V::Err| CliError::config(key, format!("`{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `bottom` or `uniform:<low>:<high>`.
fn parse_reset(key: &str, value: &str) -> Result<ResetMode, CliError> {
    let value = value.trim();
    if value == "bottom" {
        return Ok(ResetMode::Bottom);
    }
    let parts: Vec<&str> = value.split(':').collect();
    match parts.as_slice() {
        ["uniform", lo, hi] => {
            let (low, high): (f64, f64) = (parse(key, lo)?, parse(key, hi)?);
            if !(low < high) {
                return Err(CliError::config(key, "uniform range needs low < high"));
            }
            Ok(ResetMode::Uniform { low, high })
        }
        _ => Err(CliError::config(key, format!("`{value}`: expected `bottom` or `uniform:<low>:<high>`"))),
    }
}

fn format_reset(r: ResetMode) -> String {
    match r {
        ResetMode::Bottom => "bottom".into(),
        ResetMode::Uniform { low, high } => format!("uniform:{low}:{high}"),
    }
}

fn optimizer_name(o: OptimizerKind) -> &'static str {
    match o {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
    }
}

fn parse_shift_rule(key: &str, value: &str) -> Result<ShiftRule, CliError> {
    match value.trim() {
        "clamp" => Ok(ShiftRule::Clamp),
        "revert" => Ok(ShiftRule::Revert),
        other => Err(CliError::config(key, format!("unknown value `{other}`"))),
    }
}

fn shift_rule_name(r: ShiftRule) -> &'static str {
    match r {
        ShiftRule::Clamp => "clamp",
        ShiftRule::Revert => "revert",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (e, t, b, f) = (&mut self.env, &mut self.td3, &mut self.bias, &mut self.fit);
        match key {
            "seed" => self.seed = parse(key, value)?,
            "mass" => e.mass = parse(key, value)?,
            "length" => e.length = parse(key, value)?,
            "damping" => e.damping = parse(key, value)?,
            "torque_max" => e.torque_max = parse(key, value)?,
            "dt" => e.dt = parse(key, value)?,
            "gravity" => e.gravity = parse(key, value)?,
            "episode_len" => e.episode_len = parse(key, value)?,
            "exit_reward" => e.exit_reward = parse(key, value)?,
            "exit_theta" => e.exit_theta = parse(key, value)?,
            "exit_theta_dot" => e.exit_theta_dot = parse(key, value)?,
            "exit_terminates" => e.exit_terminates = parse(key, value)?,
            "velocity_abort" => {
                e.velocity_abort = match value.trim() {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "q_theta" => e.q_theta = parse(key, value)?,
            "q_theta_dot" => e.q_theta_dot = parse(key, value)?,
            "r" => e.r = parse(key, value)?,
            "train_reset" => self.train_reset = parse_reset(key, value)?,
            "eval_reset" => self.eval_reset = parse_reset(key, value)?,
            "variant" => t.variant = value.trim().parse().map_err(|_| CliError::config(key, format!("unknown value `{value}`")))?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "delay" => t.delay = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "explore_noise" => t.explore_noise = parse(key, value)?,
            "smooth_noise" => t.smooth_noise = parse(key, value)?,
            "noise_clip" => t.noise_clip = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "actor_lr" => t.actor_lr = parse(key, value)?,
            "critic_lr" => t.critic_lr = parse(key, value)?,
            "optimizer" => {
                t.optimizer = value.trim().parse().map_err(|_| CliError::config(key, format!("unknown value `{value}`")))?
            }
            "hidden" => t.hidden = parse_list(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "warmup" => t.warmup = parse(key, value)?,
            "buffer_capacity" => t.buffer_capacity = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "eval_episodes" => t.eval_episodes = parse(key, value)?,
            "checkpoint_steps" => t.checkpoint_steps = parse_list(key, value)?,
            "critic_bias_shift" => t.critic_bias_shift = parse(key, value)?,
            "m" => b.m = parse(key, value)?,
            "c_b" => b.c_b = parse(key, value)?,
            "c_w" => b.c_w = parse(key, value)?,
            "alpha" => b.alpha = parse(key, value)?,
            "lambda_lin" => b.lambda_lin = parse(key, value)?,
            "lambda_k" => b.lambda_k = parse(key, value)?,
            "lambda_bz" => b.lambda_bz = parse(key, value)?,
            "shift_rule" => b.shift_rule = parse_shift_rule(key, value)?,
            "nu_k" => f.nu_k = parse(key, value)?,
            "nu_growth" => f.nu_growth = parse(key, value)?,
            "max_rounds" => f.max_rounds = parse(key, value)?,
            "epsilon" => f.epsilon = parse(key, value)?,
            "critic_nu" => self.critic_nu = parse(key, value)?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (e, t, b, f) = (&self.env, &self.td3, &self.bias, &self.fit);
        Some(match key {
            "seed" => self.seed.to_string(),
            "mass" => e.mass.to_string(),
            "length" => e.length.to_string(),
            "damping" => e.damping.to_string(),
            "torque_max" => e.torque_max.to_string(),
            "dt" => e.dt.to_string(),
            "gravity" => e.gravity.to_string(),
            "episode_len" => e.episode_len.to_string(),
            "exit_reward" => e.exit_reward.to_string(),
            "exit_theta" => e.exit_theta.to_string(),
            "exit_theta_dot" => e.exit_theta_dot.to_string(),
            "exit_terminates" => e.exit_terminates.to_string(),
            "velocity_abort" => e.velocity_abort.map_or("none".into(), |v| v.to_string()),
            "q_theta" => e.q_theta.to_string(),
            "q_theta_dot" => e.q_theta_dot.to_string(),
            "r" => e.r.to_string(),
            "train_reset" => format_reset(self.train_reset),
            "eval_reset" => format_reset(self.eval_reset),
            "variant" => t.variant.name().into(),
            "total_steps" => t.total_steps.to_string(),
            "delay" => t.delay.to_string(),
            "gamma" => t.gamma.to_string(),
            "tau" => t.tau.to_string(),
            "explore_noise" => t.explore_noise.to_string(),
            "smooth_noise" => t.smooth_noise.to_string(),
            "noise_clip" => t.noise_clip.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "actor_lr" => t.actor_lr.to_string(),
            "critic_lr" => t.critic_lr.to_string(),
            "optimizer" => optimizer_name(t.optimizer).into(),
            "hidden" => join(&t.hidden),
            "dropout" => t.dropout.to_string(),
            "warmup" => t.warmup.to_string(),
            "buffer_capacity" => t.buffer_capacity.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "eval_episodes" => t.eval_episodes.to_string(),
            "checkpoint_steps" => join(&t.checkpoint_steps),
            "critic_bias_shift" => t.critic_bias_shift.to_string(),
            "m" => b.m.to_string(),
            "c_b" => b.c_b.to_string(),
            "c_w" => b.c_w.to_string(),
            "alpha" => b.alpha.to_string(),
            "lambda_lin" => b.lambda_lin.to_string(),
            "lambda_k" => b.lambda_k.to_string(),
            "lambda_bz" => b.lambda_bz.to_string(),
            "shift_rule" => shift_rule_name(b.shift_rule).into(),
            "nu_k" => f.nu_k.to_string(),
            "nu_growth" => f.nu_growth.to_string(),
            "max_rounds" => f.max_rounds.to_string(),
            "epsilon" => f.epsilon.to_string(),
            "critic_nu" => self.critic_nu.to_string(),
            _ => return None,
        })
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("every listed key is readable"))).collect()
    }

    /// Applies `key=value` lines from `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{raw}`", n + 1)))?;
            let key = key.trim();
            if key.starts_with("meta.") {
                continue;
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the file, then `RLQR_SEED`, then command-line overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = parse(SEED_ENV, &seed)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.env.validate().map_err(CliError::from_config)?;
        self.td3.validate().map_err(CliError::from_config)?;
        self.bias.validate().map_err(CliError::from_config)?;
        let f = &self.fit;
        if !(f.nu_k > 0.0) {
            return Err(CliError::config("nu_k", "must be positive"));
        }
        if !(f.nu_growth > 1.0) {
            return Err(CliError::config("nu_growth", "must exceed 1"));
        }
        if f.max_rounds == 0 {
            return Err(CliError::config("max_rounds", "must be at least 1"));
        }
        if !(f.epsilon >= 0.0) {
            return Err(CliError::config("epsilon", "must be non-negative"));
        }
        if !(self.critic_nu >= 0.0) {
            return Err(CliError::config("critic_nu", "must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("hidden", "64,32").unwrap();
        cfg.set("train_reset", "uniform:-1:2.5").unwrap();
        cfg.set("velocity_abort", "20").unwrap();
        let text: String = cfg.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut back = RunConfig::default();
        back.apply_text(&format!("meta.version=0\n{text}")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_values_name_the_field() {
        let mut cfg = RunConfig::default();
        let e = cfg.set("variant", "fancy").unwrap_err().to_string();
        assert!(e.contains("variant"), "{e}");
        let e = cfg.set("gamma", "abc").unwrap_err().to_string();
        assert!(e.contains("gamma"), "{e}");
        assert!(cfg.set("nonsense", "1").is_err());
    }
}
