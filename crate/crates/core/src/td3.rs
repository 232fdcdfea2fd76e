//! TD3 with optional bias shifting of the actor.

use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::biasshift::{
    apply_shift_rule, initialize_biases, min_relu_bias, regularization_loss, BiasShiftConfig, RegTarget,
};
use crate::env::{PendulumEnv, ResetMode};
use crate::error::{dim_err, Error, Result};
use crate::net::{Activation, DropoutSpec, Gradients, NetworkParams};
use crate::rng::{counter_rng, stream_rng, Stream};
use crate::scalar::{lit, to_f64, Scalar};

/// Reset/step contract used by [`train`].
pub trait Environment<T: Scalar> {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Symmetric per-dimension action bound.
    fn action_bound(&self) -> DVector<T>;
    fn reset(&mut self, rng: &mut ChaCha8Rng, phase: Phase) -> DVector<T>;
    fn step(&mut self, action: &DVector<T>) -> StepResult<T>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<T: Scalar> {
    pub next: DVector<T>,
    pub reward: T,
    pub terminated: bool,
    pub truncated: bool,
}

/// Pendulum with separate reset distributions for training and evaluation.
#[derive(Debug, Clone)]
pub struct PendulumTask<T: Scalar> {
    pub env: PendulumEnv<T>,
    pub train_reset: ResetMode,
    pub eval_reset: ResetMode,
}

impl<T: Scalar> Environment<T> for PendulumTask<T> {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bound(&self) -> DVector<T> {
        DVector::from_element(1, self.env.params.torque_max)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng, phase: Phase) -> DVector<T> {
        let mode = match phase {
            Phase::Train => self.train_reset,
            Phase::Eval => self.eval_reset,
        };
        self.env.reset(mode, rng).to_vec()
    }

    fn step(&mut self, action: &DVector<T>) -> StepResult<T> {
        let out = self.env.step(action[0]);
        StepResult {
            next: out.state.to_vec(),
            reward: out.reward,
            terminated: out.terminated,
            truncated: out.truncated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T: Scalar> {
    pub s: DVector<T>,
    pub a: DVector<T>,
    pub r: T,
    pub s_next: DVector<T>,
    pub done: bool,
}

/// Column-per-sample minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar> {
    pub s: DMatrix<T>,
    pub a: DMatrix<T>,
    pub r: DVector<T>,
    pub s_next: DMatrix<T>,
    /// 1 for terminal transitions.
    pub done: DVector<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T: Scalar> {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    s: Vec<T>,
    a: Vec<T>,
    r: Vec<T>,
    s_next: Vec<T>,
    done: Vec<bool>,
    head: usize,
    len: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            capacity,
            state_dim,
            action_dim,
            s: Vec::with_capacity(capacity.min(1 << 20) * state_dim),
            a: Vec::new(),
            r: Vec::new(),
            s_next: Vec::new(),
            done: Vec::new(),
            head: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition<T>) -> Result<()> {
        if t.s.len() != self.state_dim || t.s_next.len() != self.state_dim {
            return Err(dim_err("transition state", self.state_dim, t.s.len()));
        }
        if t.a.len() != self.action_dim {
            return Err(dim_err("transition action", self.action_dim, t.a.len()));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.len < self.capacity {
            self.s.extend_from_slice(t.s.as_slice());
            self.a.extend_from_slice(t.a.as_slice());
            self.r.push(t.r);
            self.s_next.extend_from_slice(t.s_next.as_slice());
            self.done.push(t.done);
            self.len += 1;
        } else {
            let (i, ds, da) = (self.head, self.state_dim, self.action_dim);
            self.s[i * ds..(i + 1) * ds].copy_from_slice(t.s.as_slice());
            self.a[i * da..(i + 1) * da].copy_from_slice(t.a.as_slice());
            self.r[i] = t.r;
            self.s_next[i * ds..(i + 1) * ds].copy_from_slice(t.s_next.as_slice());
            self.done[i] = t.done;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Transition<T> {
        let (ds, da) = (self.state_dim, self.action_dim);
        Transition {
            s: DVector::from_column_slice(&self.s[i * ds..(i + 1) * ds]),
            a: DVector::from_column_slice(&self.a[i * da..(i + 1) * da]),
            r: self.r[i],
            s_next: DVector::from_column_slice(&self.s_next[i * ds..(i + 1) * ds]),
            done: self.done[i],
        }
    }

    /// `n` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch<T>> {
        if n == 0 || n > self.len {
            return Err(Error::Config(format!("cannot sample {n} transitions from {}", self.len)));
        }
        let idx = index::sample(rng, self.len, n);
        let (ds, da) = (self.state_dim, self.action_dim);
        let mut batch = Batch {
            s: DMatrix::zeros(ds, n),
            a: DMatrix::zeros(da, n),
            r: DVector::zeros(n),
            s_next: DMatrix::zeros(ds, n),
            done: DVector::zeros(n),
        };
        for (k, i) in idx.iter().enumerate() {
            batch.s.column_mut(k).copy_from_slice(&self.s[i * ds..(i + 1) * ds]);
            batch.a.column_mut(k).copy_from_slice(&self.a[i * da..(i + 1) * da]);
            batch.r[k] = self.r[i];
            batch.s_next.column_mut(k).copy_from_slice(&self.s_next[i * ds..(i + 1) * ds]);
            batch.done[k] = if self.done[i] { T::one() } else { T::zero() };
        }
        Ok(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Original,
    InitOnly,
    LossOnly,
    InitAndRestrict,
    FullBiasShift,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Original,
        Variant::InitOnly,
        Variant::LossOnly,
        Variant::InitAndRestrict,
        Variant::FullBiasShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::InitOnly => "init_only",
            Variant::LossOnly => "loss_only",
            Variant::InitAndRestrict => "init_and_restrict",
            Variant::FullBiasShift => "full_bias_shift",
        }
    }

    pub fn initializes_biases(self) -> bool {
        matches!(self, Variant::InitOnly | Variant::InitAndRestrict | Variant::FullBiasShift)
    }

    pub fn regularizes(self) -> bool {
        matches!(self, Variant::LossOnly | Variant::FullBiasShift)
    }

    pub fn restricts(self) -> bool {
        matches!(self, Variant::InitAndRestrict | Variant::FullBiasShift)
    }

    /// Everything except the original algorithm uses the dropout/Swish-critic architecture.
    pub fn uses_shifted_architecture(self) -> bool {
        self != Variant::Original
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("variant: unknown value `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("optimizer: unknown value `{s}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TD3Config {
    /// Environment steps, warm-up included.
    pub total_steps: usize,
    /// Actor/target update period `d`.
    pub delay: usize,
    pub gamma: f64,
    pub tau: f64,
    /// Exploration noise std (action units).
    pub explore_noise: f64,
    /// Target smoothing noise std (action units).
    pub smooth_noise: f64,
    /// Target smoothing clip (action units).
    pub noise_clip: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub variant: Variant,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Random-action transitions collected before learning starts.
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Sample counts at which actor snapshots are kept.
    pub checkpoint_steps: Vec<usize>,
    /// Also bias-shift the critics' ReLU layers.
    pub critic_bias_shift: bool,
}

impl Default for TD3Config {
    /// Defaults for the pendulum's 0.8 N m torque limit.
    fn default() -> Self {
        Self::for_action_bound(0.8)
    }
}

impl TD3Config {
    pub fn for_action_bound(bound: f64) -> Self {
        Self {
            total_steps: 100_000,
            delay: 2,
            gamma: 0.99,
            tau: 0.005,
            explore_noise: 0.1 * bound,
            smooth_noise: 0.2 * bound,
            noise_clip: 0.5 * bound,
            batch_size: 256,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            variant: Variant::FullBiasShift,
            optimizer: OptimizerKind::Sgd,
            hidden: vec![512, 256],
            dropout: 0.1,
            warmup: 1000,
            buffer_capacity: 1_000_000,
            eval_interval: 1000,
            eval_episodes: 10,
            checkpoint_steps: Vec::new(),
            critic_bias_shift: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, cond: bool| {
            if cond {
                Err(Error::Config(format!("{name} out of range")))
            } else {
                Ok(())
            }
        };
        bad("gamma", !(self.gamma > 0.0 && self.gamma < 1.0))?;
        bad("tau", !(self.tau > 0.0 && self.tau <= 1.0))?;
        bad("delay", self.delay == 0)?;
        bad("batch_size", self.batch_size == 0)?;
        bad("buffer_capacity", self.buffer_capacity < self.batch_size)?;
        bad("eval_interval", self.eval_interval == 0)?;
        bad("explore_noise", !(self.explore_noise >= 0.0))?;
        bad("smooth_noise", !(self.smooth_noise >= 0.0))?;
        bad("noise_clip", !(self.noise_clip >= 0.0))?;
        bad("actor_lr", !(self.actor_lr > 0.0))?;
        bad("critic_lr", !(self.critic_lr > 0.0))?;
        bad("dropout", !(0.0..1.0).contains(&self.dropout))?;
        bad("hidden", self.hidden.is_empty() || self.hidden.contains(&0))
    }

    fn effective_dropout(&self) -> f64 {
        if self.variant.uses_shifted_architecture() {
            self.dropout
        } else {
            0.0
        }
    }
}

/// First-order optimizer with per-tensor state.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    pub kind: OptimizerKind,
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    steps: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: T, params: &NetworkParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            kind,
            lr,
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &Gradients<T>) {
        self.steps += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let c1 = T::one() - b1.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let kind = self.kind;
        for (((p, g), m), v) in params.tensors_mut().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            match kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Actor, twin critics and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent<T: Scalar> {
    pub actor: NetworkParams<T>,
    pub critic1: NetworkParams<T>,
    pub critic2: NetworkParams<T>,
    pub actor_target: NetworkParams<T>,
    pub critic1_target: NetworkParams<T>,
    pub critic2_target: NetworkParams<T>,
}

impl<T: Scalar> Agent<T> {
    /// Builds actor `state -> hidden.. -> action` (ReLU hidden, scaled tanh out)
    /// and critics `[state; action] -> hidden.. -> 1`.
    pub fn new(
        state_dim: usize,
        action_bound: &DVector<T>,
        cfg: &TD3Config,
        bias_cfg: &BiasShiftConfig,
        seed: u64,
    ) -> Result<Self> {
        let action_dim = action_bound.len();
        let mut sizes = vec![state_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(action_dim);
        let mut actor_acts = vec![Activation::Relu; cfg.hidden.len()];
        actor_acts.push(Activation::Tanh);
        let mut actor = NetworkParams::init_uniform(&sizes, &actor_acts, action_bound.clone(), &mut stream_rng(seed, Stream::ActorInit))?;

        sizes[0] = state_dim + action_dim;
        *sizes.last_mut().unwrap() = 1;
        let mut critic_acts = vec![Activation::Relu; cfg.hidden.len()];
        if cfg.variant.uses_shifted_architecture() && cfg.hidden.len() >= 2 {
            *critic_acts.last_mut().unwrap() = Activation::Swish;
        }
        critic_acts.push(Activation::Identity);
        let one = DVector::from_element(1, T::one());
        let mut critic_rng = stream_rng(seed, Stream::CriticInit);
        let mut critic1 = NetworkParams::init_uniform(&sizes, &critic_acts, one.clone(), &mut critic_rng)?;
        let mut critic2 = NetworkParams::init_uniform(&sizes, &critic_acts, one, &mut critic_rng)?;

        let mut bias_rng = stream_rng(seed, Stream::BiasInit);
        if cfg.variant.initializes_biases() {
            initialize_biases(&mut actor, bias_cfg, cfg.hidden.len(), &mut bias_rng)?;
        }
        if cfg.critic_bias_shift {
            let relu_layers = critic_acts.iter().take_while(|a| **a == Activation::Relu).count();
            initialize_biases(&mut critic1, bias_cfg, relu_layers, &mut bias_rng)?;
            initialize_biases(&mut critic2, bias_cfg, relu_layers, &mut bias_rng)?;
        }
        Ok(Self {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
        })
    }

    /// Deterministic action for one state.
    pub fn act(&self, s: &DVector<T>) -> Result<DVector<T>> {
        self.actor.eval(s)
    }
}

fn stack<T: Scalar>(top: &DMatrix<T>, bottom: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

fn clip_columns<T: Scalar>(a: &mut DMatrix<T>, bound: &DVector<T>) {
    for mut col in a.column_iter_mut() {
        for (v, &b) in col.iter_mut().zip(bound.iter()) {
            *v = v.max(-b).min(b);
        }
    }
}

/// Critic value for every column of `(s, a)`.
pub fn critic_values<T: Scalar>(critic: &NetworkParams<T>, s: &DMatrix<T>, a: &DMatrix<T>) -> Result<DVector<T>> {
    let out = critic.forward_batch(&stack(s, a), None)?.output;
    Ok(out.row(0).transpose())
}

/// Clipped double-Q target with target-policy smoothing.
pub fn critic_target<T: Scalar, R: Rng + ?Sized>(
    batch: &Batch<T>,
    agent: &Agent<T>,
    cfg: &TD3Config,
    action_bound: &DVector<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    let mut a_next = agent.actor_target.forward_batch(&batch.s_next, None)?.output;
    if cfg.smooth_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.smooth_noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in a_next.iter_mut() {
            let eps = normal.sample(rng).clamp(-cfg.noise_clip, cfg.noise_clip);
            *v += lit::<T>(eps);
        }
    }
    clip_columns(&mut a_next, action_bound);
    let q1 = critic_values(&agent.critic1_target, &batch.s_next, &a_next)?;
    let q2 = critic_values(&agent.critic2_target, &batch.s_next, &a_next)?;
    let gamma = lit::<T>(cfg.gamma);
    Ok(DVector::from_fn(batch.len(), |k, _| {
        batch.r[k] + gamma * (T::one() - batch.done[k]) * q1[k].min(q2[k])
    }))
}

/// One step on `N^-1 sum (y - Q(s, a))^2`; returns the pre-step loss.
pub fn critic_update<T: Scalar>(
    batch: &Batch<T>,
    critic: &mut NetworkParams<T>,
    y: &DVector<T>,
    opt: &mut Optimizer<T>,
) -> Result<T> {
    let cache = critic.forward_batch(&stack(&batch.s, &batch.a), None)?;
    let n = lit::<T>(batch.len() as f64);
    let residual = DMatrix::from_fn(1, batch.len(), |_, k| cache.output[(0, k)] - y[k]);
    let loss = residual.norm_squared() / n;
    let upstream = residual * (lit::<T>(2.0) / n);
    let grads = critic.backward(&cache, &upstream)?;
    opt.step(critic, &grads);
    Ok(loss)
}

/// Actor objective `-N^-1 sum Q1(s, pi(s)) + reg` and its parameter gradient.
pub fn actor_loss_and_grad<T: Scalar>(
    states: &DMatrix<T>,
    actor: &NetworkParams<T>,
    critic: &NetworkParams<T>,
    reg: Option<(&BiasShiftConfig, &RegTarget<T>)>,
    dropout: Option<&DropoutSpec>,
) -> Result<(T, Gradients<T>)> {
    let n = states.ncols();
    let scale = lit::<T>(1.0 / n as f64);
    let cache = actor.forward_batch(states, dropout)?;
    let x = stack(states, &cache.output);
    let c_cache = critic.forward_batch(&x, None)?;
    let q_mean = c_cache.output.sum() * scale;
    let c_grads = critic.backward(&c_cache, &DMatrix::from_element(1, n, -scale))?;
    let da = c_grads.input.rows(states.nrows(), actor.output_dim()).into_owned();
    let mut grads = actor.backward(&cache, &da)?;
    let mut loss = -q_mean;
    if let Some((cfg, target)) = reg {
        let (r, g) = regularization_loss(actor, cfg, target)?;
        loss += r;
        grads.add_scaled(&g, T::one());
    }
    Ok((loss, grads))
}

/// Policy-gradient step followed by the bias shift when `restrict` is set.
#[allow(clippy::too_many_arguments)]
pub fn actor_update<T: Scalar>(
    states: &DMatrix<T>,
    actor: &mut NetworkParams<T>,
    critic: &NetworkParams<T>,
    reg: Option<(&BiasShiftConfig, &RegTarget<T>)>,
    restrict: Option<&BiasShiftConfig>,
    dropout: Option<&DropoutSpec>,
    opt: &mut Optimizer<T>,
) -> Result<T> {
    let (loss, grads) = actor_loss_and_grad(states, actor, critic, reg, dropout)?;
    let previous = restrict.map(|_| actor.clone());
    opt.step(actor, &grads);
    if let (Some(cfg), Some(prev)) = (restrict, previous) {
        apply_shift_rule(actor, &prev, cfg);
    }
    Ok(loss)
}

/// Polyak update of all three targets.
pub fn target_update<T: Scalar>(agent: &mut Agent<T>, tau: T) -> Result<()> {
    agent.actor_target.soft_update_from(&agent.actor, tau)?;
    agent.critic1_target.soft_update_from(&agent.critic1, tau)?;
    agent.critic2_target.soft_update_from(&agent.critic2, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub min_abs_bias: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

pub const METRICS_HEADER: &str = "step,eval_return_mean,eval_return_std,min_abs_bias,actor_loss,critic_loss";

pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.eval_return_mean, r.eval_return_std, r.min_abs_bias, r.actor_loss, r.critic_loss
        )?;
    }
    Ok(())
}

/// What the observer sees after every environment step.
pub struct StepEvent<'a, T: Scalar> {
    /// Number of environment steps taken so far.
    pub step: usize,
    pub agent: &'a Agent<T>,
    /// Whether the actor and targets were updated at this step.
    pub actor_updated: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T: Scalar> {
    pub agent: Agent<T>,
    pub metrics: Vec<MetricsRow>,
    /// `(sample count, actor)` for each configured checkpoint reached.
    pub checkpoints: Vec<(usize, NetworkParams<T>)>,
}

/// Mean and population std of noise-free episode returns.
pub fn evaluate<T: Scalar, E: Environment<T>>(
    env: &mut E,
    actor: &NetworkParams<T>,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.reset(rng, Phase::Eval);
        let mut total = 0.0;
        loop {
            let out = env.step(&actor.eval(&s)?);
            total += to_f64(out.reward);
            s = out.next;
            if out.terminated || out.truncated {
                break;
            }
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok((mean, var.sqrt()))
}

fn min_bias_metric<T: Scalar>(actor: &NetworkParams<T>) -> f64 {
    min_relu_bias(actor).map_or(f64::NAN, to_f64)
}

/// Runs TD3 (or its bias-shifted variant) for `cfg.total_steps` environment steps.
pub fn train<T: Scalar, E: Environment<T>>(
    env: &mut E,
    cfg: &TD3Config,
    bias_cfg: &BiasShiftConfig,
    target: &RegTarget<T>,
    seed: u64,
    mut observer: impl FnMut(&StepEvent<'_, T>),
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    bias_cfg.validate()?;
    let state_dim = env.state_dim();
    let bound = env.action_bound();
    let action_dim = env.action_dim();
    if bound.len() != action_dim {
        return Err(dim_err("action bound", action_dim, bound.len()));
    }
    if target.enabled && target.k.shape() != (action_dim, state_dim) {
        return Err(dim_err(
            "regularization target K",
            format!("{action_dim}x{state_dim}"),
            format!("{:?}", target.k.shape()),
        ));
    }
    let mut agent = Agent::new(state_dim, &bound, cfg, bias_cfg, seed)?;
    let mut actor_opt = Optimizer::new(cfg.optimizer, lit(cfg.actor_lr), &agent.actor);
    let mut critic1_opt = Optimizer::new(cfg.optimizer, lit(cfg.critic_lr), &agent.critic1);
    let mut critic2_opt = Optimizer::new(cfg.optimizer, lit(cfg.critic_lr), &agent.critic2);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, state_dim, action_dim);

    let mut reset_rng = stream_rng(seed, Stream::EnvReset);
    let mut explore_rng = stream_rng(seed, Stream::Exploration);
    let mut warmup_rng = stream_rng(seed, Stream::Warmup);
    let mut replay_rng = stream_rng(seed, Stream::Replay);
    let mut smooth_rng = stream_rng(seed, Stream::TargetSmoothing);
    let explore = Normal::new(0.0, cfg.explore_noise).map_err(|e| Error::Config(e.to_string()))?;
    let reg = cfg.variant.regularizes().then_some((bias_cfg, target));
    let restrict = cfg.variant.restricts().then_some(bias_cfg);
    let dropout_rate = cfg.effective_dropout();
    let tau = lit::<T>(cfg.tau);

    let mut checkpoints = Vec::new();
    if cfg.checkpoint_steps.contains(&0) {
        checkpoints.push((0, agent.actor.clone()));
    }
    let mut metrics = Vec::new();
    let (mut last_actor_loss, mut last_critic_loss) = (f64::NAN, f64::NAN);
    let mut actor_updates = 0u64;
    let mut s = env.reset(&mut reset_rng, Phase::Train);

    for t in 0..cfg.total_steps {
        let a = if t < cfg.warmup {
            DVector::from_fn(action_dim, |i, _| {
                let b = to_f64(bound[i]);
                lit::<T>(warmup_rng.random_range(-b..=b))
            })
        } else {
            let mut a = agent.actor.eval(&s)?;
            for (v, &b) in a.iter_mut().zip(bound.iter()) {
                *v = (*v + lit::<T>(explore.sample(&mut explore_rng))).max(-b).min(b);
            }
            a
        };
        let out = env.step(&a);
        buffer.push(Transition {
            s: s.clone(),
            a,
            r: out.reward,
            s_next: out.next.clone(),
            done: out.terminated,
        })?;
        s = if out.terminated || out.truncated {
            env.reset(&mut reset_rng, Phase::Train)
        } else {
            out.next
        };

        let mut actor_updated = false;
        if t >= cfg.warmup && buffer.len() >= cfg.batch_size {
            let batch = buffer.sample(cfg.batch_size, &mut replay_rng)?;
            let y = critic_target(&batch, &agent, cfg, &bound, &mut smooth_rng)?;
            let l1 = critic_update(&batch, &mut agent.critic1, &y, &mut critic1_opt)?;
            let l2 = critic_update(&batch, &mut agent.critic2, &y, &mut critic2_opt)?;
            last_critic_loss = 0.5 * (to_f64(l1) + to_f64(l2));
            if cfg.critic_bias_shift {
                apply_shift_rule(&mut agent.critic1, &agent.critic1_target.clone(), bias_cfg);
                apply_shift_rule(&mut agent.critic2, &agent.critic2_target.clone(), bias_cfg);
            }
            if t % cfg.delay == 0 {
                let dropout = if dropout_rate > 0.0 {
                    let dseed = counter_rng(seed, Stream::Dropout, actor_updates).next_u64();
                    Some(DropoutSpec::new(dropout_rate, dseed)?)
                } else {
                    None
                };
                let loss = actor_update(
                    &batch.s,
                    &mut agent.actor,
                    &agent.critic1,
                    reg,
                    restrict,
                    dropout.as_ref(),
                    &mut actor_opt,
                )?;
                last_actor_loss = to_f64(loss);
                target_update(&mut agent, tau)?;
                actor_updates += 1;
                actor_updated = true;
            }
        }

        let steps = t + 1;
        observer(&StepEvent {
            step: steps,
            agent: &agent,
            actor_updated,
        });
        if cfg.checkpoint_steps.contains(&steps) {
            checkpoints.push((steps, agent.actor.clone()));
        }
        if steps % cfg.eval_interval == 0 {
            let mut eval_rng = counter_rng(seed, Stream::Evaluation, (steps / cfg.eval_interval) as u64);
            let (mean, std) = evaluate(env, &agent.actor, cfg.eval_episodes, &mut eval_rng)?;
            metrics.push(MetricsRow {
                step: steps,
                eval_return_mean: mean,
                eval_return_std: std,
                min_abs_bias: min_bias_metric(&agent.actor),
                actor_loss: last_actor_loss,
                critic_loss: last_critic_loss,
            });
            // Evaluation shares the environment; resume training from a fresh episode.
            s = env.reset(&mut reset_rng, Phase::Train);
        }
    }
    Ok(TrainOutput {
        agent,
        metrics,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PendulumParams;
    use crate::net::Layer;
    use nalgebra::{dmatrix, dvector};

    fn task() -> PendulumTask<f64> {
        PendulumTask {
            env: PendulumEnv::new(PendulumParams::default()).unwrap(),
            train_reset: ResetMode::Bottom,
            eval_reset: ResetMode::Bottom,
        }
    }

    fn desk(steps: usize, variant: Variant) -> TD3Config {
        TD3Config {
            total_steps: steps,
            hidden: vec![16, 8],
            batch_size: 32,
            warmup: 100,
            eval_interval: 250,
            eval_episodes: 1,
            variant,
            ..TD3Config::default()
        }
    }

    fn constant_net(value: f64, input: usize) -> NetworkParams<f64> {
        NetworkParams::new(
            vec![Layer {
                weight: DMatrix::zeros(1, input),
                bias: dvector![value],
                activation: Activation::Identity,
            }],
            dvector![1.0],
        )
        .unwrap()
    }

    fn batch(done: bool) -> Batch<f64> {
        Batch {
            s: dmatrix![0.1, -0.2; 0.0, 0.3],
            a: dmatrix![0.1, -0.1],
            r: dvector![0.0, 0.0],
            s_next: dmatrix![0.1, -0.2; 0.0, 0.3],
            done: if done { dvector![1.0, 1.0] } else { dvector![0.0, 0.0] },
        }
    }

    fn constant_agent() -> Agent<f64> {
        let actor = constant_net(0.0, 2);
        Agent {
            actor_target: actor.clone(),
            actor,
            critic1: constant_net(2.0, 3),
            critic2: constant_net(1.0, 3),
            critic1_target: constant_net(2.0, 3),
            critic2_target: constant_net(1.0, 3),
        }
    }

    #[test]
    fn target_uses_min_and_terminal_flag() {
        let agent = constant_agent();
        let cfg = TD3Config { gamma: 0.5, ..TD3Config::default() };
        let bound = dvector![0.8];
        let mut rng = stream_rng(0, Stream::TargetSmoothing);
        let y = critic_target(&batch(false), &agent, &cfg, &bound, &mut rng).unwrap();
        assert_eq!(y, dvector![0.5, 0.5]);
        let mut b = batch(true);
        b.r = dvector![3.0, -1.0];
        assert_eq!(critic_target(&b, &agent, &cfg, &bound, &mut rng).unwrap(), dvector![3.0, -1.0]);
    }

    #[test]
    fn buffer_ring_and_sampling() {
        let mut buf = ReplayBuffer::<f64>::new(3, 1, 1);
        for i in 0..5 {
            let v = dvector![i as f64];
            buf.push(Transition { s: v.clone(), a: v.clone(), r: i as f64, s_next: v, done: false }).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let mut rs: Vec<f64> = (0..3).map(|i| buf.get(i).r).collect();
        rs.sort_by(f64::total_cmp);
        assert_eq!(rs, vec![2.0, 3.0, 4.0]);
        let b = buf.sample(3, &mut stream_rng(1, Stream::Replay)).unwrap();
        let mut drawn: Vec<f64> = b.r.iter().copied().collect();
        drawn.sort_by(f64::total_cmp);
        assert_eq!(drawn, vec![2.0, 3.0, 4.0]);
        assert!(buf.sample(4, &mut stream_rng(1, Stream::Replay)).is_err());
        let bad = Transition { s: dvector![0.0, 1.0], a: dvector![0.0], r: 0.0, s_next: dvector![0.0], done: false };
        assert!(buf.push(bad).is_err());
    }

    #[test]
    fn critic_step_matches_hand_gradient() {
        // Q = w . [s; a] + b, one sample.
        let mut critic = NetworkParams::new(
            vec![Layer { weight: dmatrix![0.5, -1.0, 2.0], bias: dvector![0.1], activation: Activation::Identity }],
            dvector![1.0],
        )
        .unwrap();
        let b = Batch {
            s: dmatrix![1.0; 2.0],
            a: dmatrix![0.5],
            r: dvector![0.0],
            s_next: dmatrix![0.0; 0.0],
            done: dvector![0.0],
        };
        let y = dvector![3.0];
        let q = 0.5 - 2.0 + 1.0 + 0.1;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &critic);
        let loss = critic_update(&b, &mut critic, &y, &mut opt).unwrap();
        assert!((loss - (q - 3.0f64).powi(2)).abs() < 1e-12);
        let g = 2.0 * (q - 3.0);
        let expect = dmatrix![0.5 - 0.1 * g * 1.0, -1.0 - 0.1 * g * 2.0, 2.0 - 0.1 * g * 0.5];
        assert!((critic.layers[0].weight.clone() - expect).norm() < 1e-12);
        assert!((critic.layers[0].bias[0] - (0.1 - 0.1 * g)).abs() < 1e-12);
        // At the target there is nothing left to fit.
        let before = critic.clone();
        let y = critic_values(&critic, &b.s, &b.a).unwrap();
        critic_update(&b, &mut critic, &y, &mut opt).unwrap();
        assert_eq!(critic, before);
    }

    #[test]
    fn frozen_batch_loss_decreases() {
        let cfg = TD3Config { hidden: vec![16, 8], ..TD3Config::default() };
        let agent = Agent::<f64>::new(2, &dvector![0.8], &cfg, &BiasShiftConfig::default(), 3).unwrap();
        let mut critic = agent.critic1.clone();
        let mut rng = stream_rng(3, Stream::Replay);
        let s = DMatrix::from_fn(2, 64, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(1, 64, |_, _| rng.random_range(-0.8..0.8));
        let y = DVector::from_fn(64, |k, _| s[(0, k)] - a[(0, k)]);
        let b = Batch { s: s.clone(), a, r: y.clone(), s_next: s, done: DVector::zeros(64) };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-4, &critic);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let loss = critic_update(&b, &mut critic, &y, &mut opt).unwrap();
            assert!(loss <= last);
            last = loss;
        }
    }

    #[test]
    fn actor_ascends_critic() {
        // Q(s, a) = -a: ascending Q pushes the constant action down.
        let actor = NetworkParams::new(
            vec![Layer { weight: dmatrix![0.0, 0.0], bias: dvector![0.3], activation: Activation::Identity }],
            dvector![1.0],
        )
        .unwrap();
        let critic = NetworkParams::new(
            vec![Layer { weight: dmatrix![0.0, 0.0, -1.0], bias: dvector![0.0], activation: Activation::Identity }],
            dvector![1.0],
        )
        .unwrap();
        let states = dmatrix![0.1, 0.2; 0.0, -0.1];
        let mut a = actor.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &a);
        actor_update(&states, &mut a, &critic, None, None, None, &mut opt).unwrap();
        assert!(a.layers[0].bias[0] < 0.3);

        // A critic blind to the action leaves only the regularizer gradient.
        let blind = constant_net(1.0, 3);
        let cfg = BiasShiftConfig::default();
        let target = RegTarget { k: dmatrix![1.0, 2.0], enabled: true };
        let (_, g) = actor_loss_and_grad(&states, &actor, &blind, Some((&cfg, &target)), None).unwrap();
        let (_, r) = regularization_loss(&actor, &cfg, &target).unwrap();
        assert_eq!(g.weights, r.weights);
        assert_eq!(g.biases, r.biases);
    }

    #[test]
    fn soft_target_rates() {
        let mut agent = constant_agent();
        agent.actor.layers[0].bias[0] = 1.0;
        let mut copy = agent.clone();
        target_update(&mut copy, 1.0).unwrap();
        assert_eq!(copy.actor_target, copy.actor);
        let mut same = agent.clone();
        target_update(&mut same, 0.0).unwrap();
        assert_eq!(same.actor_target, agent.actor_target);
        target_update(&mut agent, 0.005).unwrap();
        assert!((agent.actor_target.layers[0].bias[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_returns_initial_agent() {
        let cfg = desk(0, Variant::FullBiasShift);
        let out = train(&mut task(), &cfg, &BiasShiftConfig::default(), &RegTarget::disabled(1, 2), 1, |_| {}).unwrap();
        assert!(out.metrics.is_empty());
        let fresh = Agent::new(2, &dvector![0.8], &cfg, &BiasShiftConfig::default(), 1).unwrap();
        assert_eq!(out.agent, fresh);
    }

    #[test]
    fn variant_flags_and_parsing() {
        assert_eq!("full_bias_shift".parse::<Variant>().unwrap(), Variant::FullBiasShift);
        let err = "bogus".parse::<Variant>().unwrap_err();
        assert!(err.to_string().contains("variant"));
        assert!(!Variant::Original.initializes_biases());
        assert!(Variant::LossOnly.regularizes() && !Variant::LossOnly.restricts());
        assert!(TD3Config { gamma: 1.0, ..TD3Config::default() }.validate().is_err());
        assert!(TD3Config { delay: 0, ..TD3Config::default() }.validate().is_err());
    }

    #[test]
    fn short_runs_are_deterministic_and_keep_delay() {
        let cfg = desk(1000, Variant::FullBiasShift);
        let bias = BiasShiftConfig::default();
        let target = RegTarget { k: dmatrix![41.0, 12.0], enabled: true };
        let mut prev: Option<NetworkParams<f64>> = None;
        let a = train(&mut task(), &cfg, &bias, &target, 7, |ev| {
            if let Some(p) = &prev {
                if ev.step % cfg.delay != 1 || ev.step <= cfg.warmup {
                    assert_eq!(p, &ev.agent.actor, "actor changed at step {}", ev.step);
                }
            }
            assert!(min_relu_bias(&ev.agent.actor).unwrap() >= 0.2);
            prev = Some(ev.agent.actor.clone());
        })
        .unwrap();
        let b = train(&mut task(), &cfg, &bias, &target, 7, |_| {}).unwrap();
        assert_eq!(a.metrics.len(), 4);
        assert_eq!(a.agent, b.agent);
        let bits = |m: &[MetricsRow]| m.iter().map(|r| r.critic_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.metrics), bits(&b.metrics));
        assert!(a.metrics.iter().all(|r| r.min_abs_bias >= 0.2));
    }
}
