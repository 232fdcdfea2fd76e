//! Torque-limited pendulum, `theta = 0` upright.

use std::io::Write;

use nalgebra::{dmatrix, DMatrix};
use rand::Rng;

use crate::error::{Error, Result};
use crate::lqr::LinearSystem;
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct PendulumParams<T: Scalar> {
    /// kg
    pub mass: T,
    /// m
    pub length: T,
    /// Viscous joint damping.
    pub damping: T,
    /// N m
    pub torque_max: T,
    /// s
    pub dt: T,
    /// m/s^2
    pub gravity: T,
    pub episode_len: usize,
    pub exit_reward: T,
    /// `|theta|` bound of the exit region, rad.
    pub exit_theta: T,
    /// `|theta_dot|` bound of the exit region, rad/s.
    pub exit_theta_dot: T,
    /// Whether entering the exit region ends the episode.
    pub exit_terminates: bool,
    /// Abort the episode when `|theta_dot|` exceeds this value.
    pub velocity_abort: Option<T>,
    pub q_theta: T,
    pub q_theta_dot: T,
    pub r: T,
}

impl<T: Scalar> Default for PendulumParams<T> {
    fn default() -> Self {
        Self {
            mass: lit(0.4),
            length: lit(0.37),
            damping: lit(0.1),
            torque_max: lit(0.8),
            dt: lit(0.01),
            gravity: lit(9.81),
            episode_len: 1000,
            exit_reward: lit(1000.0),
            exit_theta: lit(0.05),
            exit_theta_dot: lit(0.5),
            exit_terminates: true,
            velocity_abort: None,
            q_theta: lit(1.0),
            q_theta_dot: lit(0.1),
            r: lit(0.001),
        }
    }
}

impl<T: Scalar> PendulumParams<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("length", self.length),
            ("damping", self.damping),
            ("torque_max", self.torque_max),
            ("dt", self.dt),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dt > lit(0.02) {
            return Err(Error::Config("dt must not exceed 0.02 s".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::Config("episode_len must be positive".into()));
        }
        Ok(())
    }

    /// `m L^2`.
    pub fn inertia(&self) -> T {
        self.mass * self.length * self.length
    }

    /// Angular acceleration for an already saturated torque.
    pub fn acceleration(&self, s: &State<T>, torque: T) -> T {
        let inertia = self.inertia();
        self.gravity / self.length * s.theta.sin() - self.damping / inertia * s.theta_dot + torque / inertia
    }

    pub fn clip_torque(&self, u: T) -> T {
        u.max(-self.torque_max).min(self.torque_max)
    }

    /// `(x^T Q x + u^T R u) dt` for the saturated torque.
    pub fn stage_cost(&self, s: &State<T>, u: T) -> T {
        let u = self.clip_torque(u);
        (self.q_theta * s.theta * s.theta + self.q_theta_dot * s.theta_dot * s.theta_dot + self.r * u * u) * self.dt
    }

    pub fn in_exit_region(&self, s: &State<T>) -> bool {
        s.theta.abs() <= self.exit_theta && s.theta_dot.abs() <= self.exit_theta_dot
    }

    pub fn q_matrix(&self) -> DMatrix<T> {
        dmatrix![self.q_theta, T::zero(); T::zero(), self.q_theta_dot]
    }

    pub fn r_matrix(&self) -> DMatrix<T> {
        dmatrix![self.r]
    }

    /// Mechanical energy with the upright position at the top of the potential.
    pub fn energy(&self, s: &State<T>) -> T {
        lit::<T>(0.5) * self.inertia() * s.theta_dot * s.theta_dot + self.mass * self.gravity * self.length * s.theta.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State<T: Scalar> {
    pub theta: T,
    pub theta_dot: T,
}

impl<T: Scalar> State<T> {
    pub fn new(theta: T, theta_dot: T) -> Self {
        Self {
            theta: wrap_angle(theta),
            theta_dot,
        }
    }

    pub fn to_vec(self) -> nalgebra::DVector<T> {
        nalgebra::dvector![self.theta, self.theta_dot]
    }
}

/// Wraps to `(-pi, pi]`.
pub fn wrap_angle<T: Scalar>(theta: T) -> T {
    let two_pi = T::two_pi();
    let shifted = T::pi() - theta;
    T::pi() - (shifted - two_pi * (shifted / two_pi).floor())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<T: Scalar> {
    pub state: State<T>,
    pub reward: T,
    /// The new state lies in the exit region.
    pub exited: bool,
}

/// One semi-implicit Euler step: velocity first, then angle from the new velocity.
pub fn step<T: Scalar>(p: &PendulumParams<T>, s: &State<T>, u: T) -> StepOutcome<T> {
    let torque = p.clip_torque(u);
    let cost = p.stage_cost(s, torque);
    let theta_dot = s.theta_dot + p.acceleration(s, torque) * p.dt;
    let state = State::new(s.theta + theta_dot * p.dt, theta_dot);
    let exited = p.in_exit_region(&state);
    let reward = if exited { p.exit_reward - cost } else { -cost };
    StepOutcome { state, reward, exited }
}

/// Small-angle linearization about the upright equilibrium.
pub fn linearize_upright<T: Scalar>(p: &PendulumParams<T>) -> Result<LinearSystem<T>> {
    let inertia = p.inertia();
    LinearSystem::new(
        dmatrix![T::zero(), T::one(); p.gravity / p.length, -p.damping / inertia],
        dmatrix![T::zero(); T::one() / inertia],
        p.q_matrix(),
        p.r_matrix(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResetMode {
    /// Hanging down at rest.
    Bottom,
    /// `theta ~ U(low, high)`, at rest.
    Uniform { low: f64, high: f64 },
}

pub fn reset<T: Scalar, R: Rng + ?Sized>(mode: ResetMode, rng: &mut R) -> State<T> {
    match mode {
        ResetMode::Bottom => State::new(T::pi(), T::zero()),
        ResetMode::Uniform { low, high } => State::new(lit(rng.random_range(low..high)), T::zero()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep<T: Scalar> {
    pub state: State<T>,
    pub reward: T,
    /// Terminal for bootstrapping: exit reached (when it terminates) or velocity abort.
    pub terminated: bool,
    /// Episode length reached.
    pub truncated: bool,
}

impl<T: Scalar> EnvStep<T> {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Episodic wrapper tracking the step counter.
#[derive(Debug, Clone)]
pub struct PendulumEnv<T: Scalar> {
    pub params: PendulumParams<T>,
    pub state: State<T>,
    pub t: usize,
}

impl<T: Scalar> PendulumEnv<T> {
    pub fn new(params: PendulumParams<T>) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            state: State::new(T::pi(), T::zero()),
            t: 0,
        })
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, mode: ResetMode, rng: &mut R) -> State<T> {
        self.reset_to(reset(mode, rng))
    }

    pub fn reset_to(&mut self, s: State<T>) -> State<T> {
        self.state = s;
        self.t = 0;
        s
    }

    pub fn step(&mut self, u: T) -> EnvStep<T> {
        let out = step(&self.params, &self.state, u);
        self.state = out.state;
        self.t += 1;
        let aborted = self.params.velocity_abort.is_some_and(|v| out.state.theta_dot.abs() > v);
        EnvStep {
            state: out.state,
            reward: out.reward,
            terminated: (out.exited && self.params.exit_terminates) || aborted,
            truncated: self.t >= self.params.episode_len,
        }
    }
}

/// A fixed-length closed-loop simulation record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub dt: T,
    /// `states[0]` is the initial state; one more entry than `actions`.
    pub states: Vec<State<T>>,
    /// Saturated torques actually applied.
    pub actions: Vec<T>,
    pub rewards: Vec<T>,
    pub done: Vec<bool>,
}

impl<T: Scalar> Trajectory<T> {
    /// Accumulated `(x^T Q x + u^T R u) dt`.
    pub fn quadratic_cost(&self, p: &PendulumParams<T>) -> T {
        self.states
            .iter()
            .zip(&self.actions)
            .fold(T::zero(), |acc, (s, &u)| acc + p.stage_cost(s, u))
    }

    pub fn final_state(&self) -> State<T> {
        *self.states.last().unwrap()
    }

    /// Writes `t,theta,theta_dot,u,reward,done`; the last row holds the final state.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,theta,theta_dot,u,reward,done")?;
        let dt = to_f64(self.dt);
        for (i, s) in self.states.iter().enumerate() {
            let (u, r, d) = match self.actions.get(i) {
                Some(&u) => (to_f64(u), to_f64(self.rewards[i]), self.done[i]),
                None => (0.0, 0.0, self.done.last().copied().unwrap_or(false)),
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                i as f64 * dt,
                to_f64(s.theta),
                to_f64(s.theta_dot),
                u,
                r,
                u8::from(d)
            )?;
        }
        Ok(())
    }
}

/// Runs `steps` closed-loop steps from `x0`, ignoring termination.
pub fn rollout<T: Scalar>(
    p: &PendulumParams<T>,
    x0: State<T>,
    steps: usize,
    mut policy: impl FnMut(&State<T>) -> T,
) -> Trajectory<T> {
    let mut traj = Trajectory {
        dt: p.dt,
        states: Vec::with_capacity(steps + 1),
        actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        done: Vec::with_capacity(steps),
    };
    let mut s = x0;
    traj.states.push(s);
    for _ in 0..steps {
        let u = p.clip_torque(policy(&s));
        let out = step(p, &s, u);
        traj.actions.push(u);
        traj.rewards.push(out.reward);
        traj.done.push(out.exited);
        s = out.state;
        traj.states.push(s);
    }
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn params() -> PendulumParams<f64> {
        PendulumParams::default()
    }

    #[test]
    fn equilibria_are_fixed_points() {
        let p = params();
        let out = step(&p, &State::new(0.0, 0.0), 0.0);
        assert_eq!(out.state, State::new(0.0, 0.0));
        assert_eq!(p.stage_cost(&State::new(0.0, 0.0), 0.0), 0.0);
        let out = step(&p, &State::new(std::f64::consts::PI, 0.0), 0.0);
        assert!((out.state.theta - std::f64::consts::PI).abs() < 1e-12);
        assert!(out.state.theta_dot.abs() < 1e-12);
    }

    #[test]
    fn single_euler_step_by_hand() {
        let p = params();
        let out = step(&p, &State::new(0.1, 0.0), 0.0);
        let w1 = 0.01 * (9.81 / 0.37) * 0.1f64.sin();
        assert!((out.state.theta_dot - w1).abs() < 1e-15);
        assert!((out.state.theta - (0.1 + 0.01 * w1)).abs() < 1e-15);
    }

    #[test]
    fn wrapping_interval() {
        let pi = std::f64::consts::PI;
        assert_eq!(wrap_angle(pi), pi);
        assert_eq!(wrap_angle(-pi), pi);
        assert!((wrap_angle(3.0 * pi / 2.0) + pi / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * pi / 2.0) - pi / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.3f64) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn unit_linearization() {
        let p = PendulumParams::<f64> {
            mass: 1.0,
            length: 1.0,
            damping: 1e-300,
            gravity: 1.0,
            ..params()
        };
        let sys = linearize_upright(&p).unwrap();
        assert!((sys.a.clone() - dmatrix![0.0, 1.0; 1.0, 0.0]).norm() < 1e-12);
        assert_eq!(sys.b, dmatrix![0.0; 1.0]);
    }

    #[test]
    fn linearization_matches_finite_difference_jacobian() {
        let p = params();
        let sys = linearize_upright(&p).unwrap();
        let h = 1e-6;
        let f = |th: f64, w: f64, u: f64| [w, p.acceleration(&State { theta: th, theta_dot: w }, u)];
        let cols = [
            (f(h, 0.0, 0.0), f(-h, 0.0, 0.0)),
            (f(0.0, h, 0.0), f(0.0, -h, 0.0)),
        ];
        for (j, (plus, minus)) in cols.iter().enumerate() {
            for i in 0..2 {
                let d = (plus[i] - minus[i]) / (2.0 * h);
                assert!((d - sys.a[(i, j)]).abs() < 1e-6 * (1.0 + d.abs()), "A[{i},{j}]");
            }
        }
        let (plus, minus) = (f(0.0, 0.0, h), f(0.0, 0.0, -h));
        for i in 0..2 {
            let d = (plus[i] - minus[i]) / (2.0 * h);
            assert!((d - sys.b[(i, 0)]).abs() < 1e-6 * (1.0 + d.abs()));
        }
    }

    #[test]
    fn reset_modes() {
        let mut rng = stream_rng(1, Stream::EnvReset);
        let s: State<f64> = reset(ResetMode::Bottom, &mut rng);
        assert_eq!(s, State::new(std::f64::consts::PI, 0.0));
        let mode = ResetMode::Uniform { low: -0.4, high: 0.4 };
        let a: State<f64> = reset(mode, &mut stream_rng(3, Stream::EnvReset));
        let b: State<f64> = reset(mode, &mut stream_rng(3, Stream::EnvReset));
        assert_eq!(a, b);
        let draws: Vec<f64> = (0..10_000).map(|_| reset::<f64, _>(mode, &mut rng).theta).collect();
        assert!(draws.iter().all(|t| t.abs() < 0.4));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn torque_saturation() {
        let p = params();
        let s = State::new(0.7, -1.0);
        assert_eq!(step(&p, &s, 5.0), step(&p, &s, 0.8));
        assert_eq!(step(&p, &s, -100.0), step(&p, &s, -0.8));
    }

    #[test]
    fn damped_energy_decreases() {
        let p = PendulumParams { dt: 1e-3, ..params() };
        let mut s = State::new(0.5, 0.0);
        let mut e = p.energy(&s);
        for _ in 0..10_000 {
            s = step(&p, &s, 0.0).state;
            let e_next = p.energy(&s);
            // Symplectic Euler adds an O(dt) oscillation on top of the damping loss.
            assert!(e_next <= e + 1e-3 * p.dt * e.abs(), "{e_next} > {e}");
            e = e_next;
        }
    }

    #[test]
    fn constant_torque_cannot_swing_up() {
        let p = params();
        let traj = rollout(&p, State::new(std::f64::consts::PI, 0.0), p.episode_len, |_| 0.8);
        assert!(traj.states.iter().all(|s| s.theta.abs() >= 0.1));
    }

    #[test]
    fn env_terminates_on_exit_and_length() {
        let p = PendulumParams { episode_len: 3, ..params() };
        let mut env = PendulumEnv::new(p).unwrap();
        env.reset_to(State::new(0.0, 0.0));
        let s = env.step(0.0);
        assert!(s.terminated && (s.reward - 1000.0).abs() < 1e-12);
        env.reset_to(State::new(std::f64::consts::PI, 0.0));
        assert!(!env.step(0.0).done());
        assert!(!env.step(0.0).done());
        let last = env.step(0.0);
        assert!(last.truncated && !last.terminated);
        assert!(PendulumEnv::new(PendulumParams { dt: 0.05, ..params() }).is_err());
    }

    #[test]
    fn trajectory_csv_header() {
        let p = params();
        let traj = rollout(&p, State::new(0.1, 0.0), 2, |_| 0.0);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,theta,theta_dot,u,reward,done\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
