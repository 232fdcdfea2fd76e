//! Creating and keeping the linear region of a ReLU network.
//!
//! Biases are drawn away from zero at initialization, clamped back to
//! magnitude `m` after every gradient step, and the masked layer gains are
//! regularized so the region neither collapses nor drifts from a target gain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::net::{effective_linearization, Activation, Gradients, NetworkParams};
use crate::scalar::{lit, sign_pos, Scalar};

/// How a bias that fell below `m` is restored after an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftRule {
    /// `b <- m * sign(b)`, with `sign(0) = +1`.
    Clamp,
    /// Restore the value held before the update.
    Revert,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasShiftConfig {
    /// Region size in input units.
    pub m: f64,
    /// Upper band multiplier for initial biases, `> 1`.
    pub c_b: f64,
    /// Growth factor for biases whose effective value is too small, `> 0`.
    pub c_w: f64,
    /// Target magnitude of masked layer gains.
    pub alpha: f64,
    pub lambda_lin: f64,
    pub lambda_k: f64,
    pub lambda_bz: f64,
    pub shift_rule: ShiftRule,
}

impl Default for BiasShiftConfig {
    fn default() -> Self {
        Self {
            m: 0.2,
            c_b: 2.0,
            c_w: 0.1,
            alpha: 1.0,
            lambda_lin: 1e-3,
            lambda_k: 1e-2,
            lambda_bz: 1e-2,
            shift_rule: ShiftRule::Clamp,
        }
    }
}

impl BiasShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, cond: bool| {
            if cond {
                Err(Error::Config(format!("{name} out of range")))
            } else {
                Ok(())
            }
        };
        bad("m", !(self.m > 0.0))?;
        bad("c_b", !(self.c_b > 1.0))?;
        bad("c_w", !(self.c_w > 0.0))?;
        bad("alpha", !(self.alpha > 0.0))?;
        bad("lambda_lin", !(self.lambda_lin >= 0.0))?;
        bad("lambda_k", !(self.lambda_k >= 0.0))?;
        bad("lambda_bz", !(self.lambda_bz >= 0.0))
    }
}

/// Gain the final pre-activation should reproduce (`W_eff = -K`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegTarget<T: Scalar> {
    pub k: DMatrix<T>,
    pub enabled: bool,
}

impl<T: Scalar> RegTarget<T> {
    pub fn disabled(action_dim: usize, state_dim: usize) -> Self {
        Self {
            k: DMatrix::zeros(action_dim, state_dim),
            enabled: false,
        }
    }
}

/// Largest number of `b += c_w b` growth steps per unit before giving up.
pub const MAX_BIAS_INCREMENTS: usize = 10_000;

/// Bias initialization for the first `layers` layers of `params`.
///
/// Every bias is drawn from `(-c_b m, -m) U (m, c_b m)`. From the second layer
/// on, a unit whose effective bias `(W_l b^(m)_{l-1} + b_l)_j` is still
/// smaller than `m` in magnitude has its bias grown geometrically until it is
/// not.
pub fn initialize_biases<T: Scalar, R: Rng + ?Sized>(
    params: &mut NetworkParams<T>,
    cfg: &BiasShiftConfig,
    layers: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    if layers > params.depth() {
        return Err(dim_err("bias-shift layers", format!("<= {}", params.depth()), layers));
    }
    let m = lit::<T>(cfg.m);
    let c_w = lit::<T>(cfg.c_w);
    let mut prev_bias = DVector::<T>::zeros(params.input_dim());
    for l in 0..layers {
        let layer = &mut params.layers[l];
        for b in layer.bias.iter_mut() {
            let mag = rng.random_range(cfg.m..cfg.c_b * cfg.m);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            *b = lit(sign * mag);
        }
        if l > 0 {
            let carried = &layer.weight * &prev_bias;
            for j in 0..layer.bias.len() {
                let mut steps = 0;
                while (carried[j] + layer.bias[j]).abs() < m {
                    if steps == MAX_BIAS_INCREMENTS {
                        return Err(Error::InitFailure {
                            layer: l,
                            unit: j,
                            reason: format!("effective bias below m after {MAX_BIAS_INCREMENTS} increments"),
                        });
                    }
                    let b = layer.bias[j];
                    layer.bias[j] = b + c_w * b;
                    steps += 1;
                }
            }
        }
        let eff = &layer.weight * &prev_bias + &layer.bias;
        prev_bias = match layer.activation {
            Activation::Relu => eff.map(|v| if v > T::zero() { v } else { T::zero() }),
            _ => eff,
        };
    }
    Ok(())
}

/// `b_j <- m sign(b_j)` for every stored ReLU-layer bias with `|b_j| < m`.
pub fn enforce_bias_magnitude<T: Scalar>(params: &mut NetworkParams<T>, m: T) {
    for layer in params.layers.iter_mut().filter(|l| l.activation == Activation::Relu) {
        for b in layer.bias.iter_mut() {
            if b.abs() < m {
                *b = m * sign_pos(*b);
            }
        }
    }
}

/// Restores every ReLU-layer bias that fell below `m` to its value in `previous`.
pub fn revert_small_biases<T: Scalar>(params: &mut NetworkParams<T>, previous: &NetworkParams<T>, m: T) {
    for (layer, old) in params.layers.iter_mut().zip(&previous.layers) {
        if layer.activation != Activation::Relu {
            continue;
        }
        for (b, &b_old) in layer.bias.iter_mut().zip(old.bias.iter()) {
            if b.abs() < m {
                *b = b_old;
            }
        }
    }
}

/// Smallest stored bias magnitude over the ReLU layers (`None` without any).
pub fn min_relu_bias<T: Scalar>(params: &NetworkParams<T>) -> Option<T> {
    params
        .layers
        .iter()
        .filter(|l| l.activation == Activation::Relu)
        .flat_map(|l| l.bias.iter().map(|b| b.abs()))
        .reduce(|a, b| a.min(b))
}

/// Applies the configured post-update shift rule.
pub fn apply_shift_rule<T: Scalar>(params: &mut NetworkParams<T>, previous: &NetworkParams<T>, cfg: &BiasShiftConfig) {
    let m = lit::<T>(cfg.m);
    match cfg.shift_rule {
        ShiftRule::Clamp => enforce_bias_magnitude(params, m),
        ShiftRule::Revert => revert_small_biases(params, previous, m),
    }
}

/// Value and parameter gradient of the linear-region regularizer.
///
/// With `E_l = W_l W^(m)_{l-1}` and `h_l = W_l b^(m)_{l-1}`:
///
/// `sum_l lambda_lin/2 (|E_l - alpha sign(E_l)|^2 + |h_l|^2)`
/// `+ lambda_k/2 |E_n + K|^2 + lambda_bz/2 |h_n + b_n|^2` (when the target is enabled).
///
/// Masks and signs are held fixed while differentiating.
pub fn regularization_loss<T: Scalar>(
    params: &NetworkParams<T>,
    cfg: &BiasShiftConfig,
    target: &RegTarget<T>,
) -> Result<(T, Gradients<T>)> {
    let lin = effective_linearization(params, lit::<T>(cfg.m))?;
    let n = params.depth();
    let state_dim = params.input_dim();
    if target.enabled && target.k.shape() != (params.output_dim(), state_dim) {
        return Err(dim_err(
            "regularization target K",
            format!("{}x{}", params.output_dim(), state_dim),
            format!("{:?}", target.k.shape()),
        ));
    }
    let half = lit::<T>(0.5);
    let alpha = lit::<T>(cfg.alpha);
    let (l_lin, l_k, l_bz) = (lit::<T>(cfg.lambda_lin), lit::<T>(cfg.lambda_k), lit::<T>(cfg.lambda_bz));

    // Inputs to each layer inside the region.
    let prev_w: Vec<DMatrix<T>> = (0..n)
        .map(|l| if l == 0 { DMatrix::identity(state_dim, state_dim) } else { lin.masked_weight(l - 1) })
        .collect();
    let prev_b: Vec<DVector<T>> = (0..n)
        .map(|l| if l == 0 { DVector::zeros(state_dim) } else { lin.masked_bias(l - 1) })
        .collect();

    let mut loss = T::zero();
    let mut d_e = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    for l in 0..n {
        let e = &lin.effective_weights[l];
        let dev = e.map(|v| v - alpha * sign_pos(v));
        let hl = &params.layers[l].weight * &prev_b[l];
        loss += l_lin * half * (dev.norm_squared() + hl.norm_squared());
        d_e.push(dev * l_lin);
        h.push(hl);
    }
    let mut d_c = vec![DVector::<T>::zeros(0); n];
    d_c[n - 1] = DVector::zeros(params.output_dim());
    if target.enabled {
        let gain_err = lin.w_eff() + &target.k;
        let c_n = lin.b_eff();
        loss += half * (l_k * gain_err.norm_squared() + l_bz * c_n.norm_squared());
        d_e[n - 1] += gain_err * l_k;
        d_c[n - 1] = c_n * l_bz;
    }

    let mut grads = Gradients::zeros_like(params, 0);
    for l in (0..n).rev() {
        let w = &params.layers[l].weight;
        let d_h = &h[l] * l_lin + &d_c[l];
        grads.weights[l] = &d_e[l] * prev_w[l].transpose() + &d_h * prev_b[l].transpose();
        grads.biases[l] = d_c[l].clone();
        if l > 0 {
            let mask = &lin.masks[l - 1];
            let mut d_f = w.transpose() * &d_e[l];
            for (mut row, &keep) in d_f.row_iter_mut().zip(mask.iter()) {
                row *= keep;
            }
            d_e[l - 1] += d_f;
            d_c[l - 1] = (w.transpose() * &d_h).component_mul(mask);
        }
    }
    Ok((loss, grads))
}
