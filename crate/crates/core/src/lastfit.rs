//! Refitting the actor's last layer so its linear region reproduces an LQR gain.
//!
//! All gains here live on the final pre-activation. For an actor with output
//! `s * tanh(z)`, the plant sees `u ~ s z` near the origin, so the target for
//! `z` is `K / s` and the closed loop is tested with `K_eff = -s W_o W_prev`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::lqr::{closed_loop_max_real_eig, LinearSystem};
use crate::net::{effective_linearization, NetworkParams};
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub nu_k: f64,
    pub nu_growth: f64,
    pub max_rounds: usize,
    /// Offset tolerance, in pre-activation units.
    pub epsilon: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            nu_k: 1.0,
            nu_growth: 10.0,
            max_rounds: 20,
            epsilon: 1e-6 * 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem<T: Scalar> {
    /// `W^(m)_{n-1}`, hidden x state.
    pub w_prev: DMatrix<T>,
    /// `b^(m)_{n-1}`.
    pub b_prev: DVector<T>,
    pub w_n: DMatrix<T>,
    pub b_n: DVector<T>,
    /// Target gain on the pre-activation: the fit drives `W_o W_prev` to `-k`.
    pub k: DMatrix<T>,
    /// Per-action output scale, used to map pre-activation gains to plant gains.
    pub output_scale: DVector<T>,
    pub nu_k: T,
    pub epsilon: T,
    pub nu_growth: T,
    pub max_rounds: usize,
}

impl<T: Scalar> FitProblem<T> {
    /// Builds the problem for `actor` and a plant-level LQR gain `lqr_k`
    /// (`u = -K x`), linearizing with region size `m`.
    pub fn from_actor(actor: &NetworkParams<T>, lqr_k: &DMatrix<T>, m: T, cfg: &FitConfig) -> Result<Self> {
        let lin = effective_linearization(actor, m)?;
        let last = actor.last_layer();
        let (a, s) = (actor.output_dim(), actor.input_dim());
        if lqr_k.shape() != (a, s) {
            return Err(dim_err("LQR gain", format!("{a}x{s}"), format!("{:?}", lqr_k.shape())));
        }
        let mut k = lqr_k.clone();
        for (mut row, &scale) in k.row_iter_mut().zip(actor.output_scale.iter()) {
            row /= scale;
        }
        let p = Self {
            w_prev: lin.prev_weight(),
            b_prev: lin.prev_bias(),
            w_n: last.weight.clone(),
            b_n: last.bias.clone(),
            k,
            output_scale: actor.output_scale.clone(),
            nu_k: lit(cfg.nu_k),
            epsilon: lit(cfg.epsilon),
            nu_growth: lit(cfg.nu_growth),
            max_rounds: cfg.max_rounds,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        let (h, s) = self.w_prev.shape();
        let a = self.w_n.nrows();
        if self.w_n.ncols() != h {
            return Err(dim_err("W_n columns", h, self.w_n.ncols()));
        }
        if self.b_prev.len() != h {
            return Err(dim_err("b_prev", h, self.b_prev.len()));
        }
        if self.b_n.len() != a {
            return Err(dim_err("b_n", a, self.b_n.len()));
        }
        if self.k.shape() != (a, s) {
            return Err(dim_err("K", format!("{a}x{s}"), format!("{:?}", self.k.shape())));
        }
        if self.output_scale.len() != a {
            return Err(dim_err("output_scale", a, self.output_scale.len()));
        }
        Ok(())
    }

    /// Plant-level feedback matrix `K_eff` with `u = -K_eff x` for last layer `w_o`.
    pub fn plant_gain(&self, w_o: &DMatrix<T>) -> DMatrix<T> {
        let mut k = -(w_o * &self.w_prev);
        for (mut row, &scale) in k.row_iter_mut().zip(self.output_scale.iter()) {
            row *= scale;
        }
        k
    }

    fn objective(&self, w_o: &DMatrix<T>, b_o: &DVector<T>) -> T {
        ((w_o - &self.w_n).norm_squared() + (b_o - &self.b_n).norm_squared()).sqrt()
    }

    fn finish(&self, w_o: DMatrix<T>, rounds: usize, nu: f64, sys: Option<&LinearSystem<T>>) -> Result<FitResult<T>> {
        let b_o = -(&w_o * &self.b_prev);
        let gain_error = (&w_o * &self.w_prev + &self.k).norm();
        let offset = &w_o * &self.b_prev + &b_o;
        let max_real_eig = match sys {
            Some(sys) => Some(closed_loop_max_real_eig(sys, &self.plant_gain(&w_o), &offset)?),
            None => None,
        };
        let stable = max_real_eig.is_some_and(|e| e < T::zero()) && offset.amax() <= self.epsilon;
        Ok(FitResult {
            residual_to_original: self.objective(&w_o, &b_o),
            gain_error,
            offset,
            rounds,
            stable,
            nu_final: nu,
            max_real_eig,
            history: Vec::new(),
            w_o,
            b_o,
        })
    }
}

/// One round of the relaxation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitRound {
    pub nu: f64,
    pub gain_error: f64,
    pub max_real_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T: Scalar> {
    pub w_o: DMatrix<T>,
    pub b_o: DVector<T>,
    /// `sqrt(|W_o - W_n|^2 + |b_o - b_n|^2)`.
    pub residual_to_original: T,
    /// `|W_o W_prev + K|`.
    pub gain_error: T,
    /// `W_o b_prev + b_o`.
    pub offset: DVector<T>,
    pub rounds: usize,
    pub stable: bool,
    /// Penalty weight of the returned iterate (infinite for the exact fit).
    pub nu_final: f64,
    /// Closed-loop spectral abscissa, when a plant was supplied.
    pub max_real_eig: Option<T>,
    pub history: Vec<FitRound>,
}

/// `(I + b b^T)^-1 v` by Sherman-Morrison.
fn shifted_identity_solve<T: Scalar>(b: &DVector<T>, v: &DMatrix<T>) -> DMatrix<T> {
    let denom = T::one() + b.norm_squared();
    let proj = b.transpose() * v / denom;
    v - b * proj
}

fn rank<T: Scalar>(m: &DMatrix<T>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let dim = m.nrows().max(m.ncols());
    let tol = max * T::default_epsilon() * lit(dim as f64 * 10.0);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Minimizes `|W_o - W_n|^2 + |b_o - b_n|^2` subject to `W_o W_prev = -K` and
/// `W_o b_prev + b_o = 0`. The stability fields are filled in when `sys` is given.
pub fn fit_exact<T: Scalar>(p: &FitProblem<T>, sys: Option<&LinearSystem<T>>) -> Result<FitResult<T>> {
    p.check()?;
    let s = p.w_prev.ncols();
    let r = rank(&p.w_prev);
    if r < s {
        return Err(Error::Infeasible(format!(
            "previous-layer map has rank {r} < state dimension {s}; the linear region has collapsed"
        )));
    }
    // Substituting b_o = -W_o b_prev leaves, per row w:
    //   min w^T (I + b b^T) w - 2 w^T g   s.t.  C^T w = -k,
    // with g = w_n - b b_n and C = W_prev.
    let b = &p.b_prev;
    let c = &p.w_prev;
    let g = p.w_n.transpose() - b * p.b_n.transpose();
    let hinv_g = shifted_identity_solve(b, &g);
    let hinv_c = shifted_identity_solve(b, c);
    let schur = c.transpose() * &hinv_c;
    let rhs = c.transpose() * &hinv_g + p.k.transpose();
    let lambda = match schur.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => schur
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Infeasible("singular constraint system".into()))?,
    };
    let w_cols = hinv_g - hinv_c * lambda;
    let mut out = p.finish(w_cols.transpose(), 1, f64::INFINITY, sys)?;
    out.history.push(FitRound {
        nu: f64::INFINITY,
        gain_error: to_f64(out.gain_error),
        max_real_eig: out.max_real_eig.map_or(f64::NAN, to_f64),
    });
    Ok(out)
}

/// Minimizes `|W_o - W_n|^2 + |b_o - b_n|^2 + nu |W_o W_prev + K|^2` with
/// `b_o = -W_o b_prev`.
///
/// Solved through the state-sized system `(I / nu + C^T H^-1 C)`, `C = W_prev`,
/// `H = I + b b^T`, in its eigenbasis; directions in the null space of `C`
/// contribute nothing and are dropped, so collapsed regions and very large
/// `nu` stay well conditioned.
pub fn fit_penalized<T: Scalar>(p: &FitProblem<T>, nu: T) -> Result<DMatrix<T>> {
    p.check()?;
    if !(nu > T::zero()) {
        return Err(Error::Config("penalty weight must be positive".into()));
    }
    let b = &p.b_prev;
    let c = &p.w_prev;
    let g = shifted_identity_solve(b, &(p.w_n.transpose() - b * p.b_n.transpose()));
    let y = shifted_identity_solve(b, c);
    let m = c.transpose() * &y;
    let eig = ((&m + m.transpose()) * lit::<T>(0.5)).symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(T::zero(), |a, v| a.max(v));
    let tol = top * T::default_epsilon() * lit((c.nrows().max(c.ncols()) * 10) as f64);
    let scale = eig.eigenvalues.map(|l| if l > tol { nu / (T::one() + nu * l) } else { T::zero() });
    let inner = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
    let w_cols = &g - y * inner * (c.transpose() * &g + p.k.transpose());
    Ok(w_cols.transpose())
}

/// Penalized fit with a growing weight until the closed loop is stable.
pub fn fit_relaxed<T: Scalar>(p: &FitProblem<T>, sys: &LinearSystem<T>) -> Result<FitResult<T>> {
    p.check()?;
    if p.max_rounds == 0 {
        return Err(Error::Config("max_rounds must be positive".into()));
    }
    let mut nu = p.nu_k;
    let mut history = Vec::with_capacity(p.max_rounds);
    let mut last_gain_error = T::zero();
    for round in 1..=p.max_rounds {
        let w_o = fit_penalized(p, nu)?;
        let mut out = p.finish(w_o, round, to_f64(nu), Some(sys))?;
        history.push(FitRound {
            nu: to_f64(nu),
            gain_error: to_f64(out.gain_error),
            max_real_eig: out.max_real_eig.map_or(f64::NAN, to_f64),
        });
        if out.stable {
            out.history = history;
            return Ok(out);
        }
        last_gain_error = out.gain_error;
        nu *= p.nu_growth;
    }
    Err(Error::Unstabilizable {
        rounds: p.max_rounds,
        gain_error: to_f64(last_gain_error),
    })
}

/// Replaces the last layer with the fitted one.
pub fn apply_fit<T: Scalar>(actor: &NetworkParams<T>, r: &FitResult<T>) -> Result<NetworkParams<T>> {
    let last = actor.last_layer();
    if r.w_o.shape() != last.weight.shape() {
        return Err(dim_err(
            "fitted last layer",
            format!("{:?}", last.weight.shape()),
            format!("{:?}", r.w_o.shape()),
        ));
    }
    if r.b_o.len() != last.bias.len() {
        return Err(dim_err("fitted last bias", last.bias.len(), r.b_o.len()));
    }
    let mut out = actor.clone();
    let last = out.layers.last_mut().unwrap();
    last.weight = r.w_o.clone();
    last.bias = r.b_o.clone();
    Ok(out)
}

/// `metric,value` summary of a fit against the original last layer.
pub fn write_fit_report<W: Write, T: Scalar>(out: &mut W, p: &FitProblem<T>, r: &FitResult<T>) -> std::io::Result<()> {
    writeln!(out, "metric,value")?;
    writeln!(out, "gain_error,{}", to_f64(r.gain_error))?;
    writeln!(out, "offset_norm,{}", to_f64(r.offset.amax()))?;
    writeln!(out, "rounds,{}", r.rounds)?;
    writeln!(out, "nu_final,{}", r.nu_final)?;
    writeln!(out, "max_real_eig,{}", r.max_real_eig.map_or(f64::NAN, to_f64))?;
    writeln!(out, "stable,{}", r.stable)?;
    writeln!(out, "weight_delta,{}", to_f64((&r.w_o - &p.w_n).norm()))?;
    writeln!(out, "bias_delta,{}", to_f64((&r.b_o - &p.b_n).norm()))?;
    writeln!(out, "residual_to_original,{}", to_f64(r.residual_to_original))
}

/// `round,nu,gain_error,max_real_eig` per relaxation round.
pub fn write_fit_history<W: Write>(out: &mut W, history: &[FitRound]) -> std::io::Result<()> {
    writeln!(out, "round,nu,gain_error,max_real_eig")?;
    for (i, h) in history.iter().enumerate() {
        writeln!(out, "{},{},{},{}", i + 1, h.nu, h.gain_error, h.max_real_eig)?;
    }
    Ok(())
}
