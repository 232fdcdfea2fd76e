//! Masked linearization of a bias-shifted network.
//!
//! With `W^(0) = I` and `b^(0) = 0`, each layer contributes the effective
//! weight `W_l W^(m)_{l-1}` and effective bias `W_l b^(m)_{l-1} + b_l`. A ReLU
//! unit whose effective bias is positive passes its input unchanged across the
//! whole region; one whose effective bias is negative is off, so its row is
//! zeroed in the masked versions `W^(m)_l`, `b^(m)_l`.

use nalgebra::{DMatrix, DVector};

use super::{Activation, NetworkParams};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveLinearization<T: Scalar> {
    /// Requested region size `m`.
    pub region_size: T,
    /// Activations of the linearized layers.
    pub activations: Vec<Activation>,
    /// 1 where the unit is active inside the region. Non-ReLU layers are all ones.
    pub masks: Vec<DVector<T>>,
    /// Effective weight `W_l W^(m)_{l-1}` of every layer (before masking).
    pub effective_weights: Vec<DMatrix<T>>,
    /// Effective bias `W_l b^(m)_{l-1} + b_l` of every layer (before masking).
    pub effective_biases: Vec<DVector<T>>,
    /// `|effective bias|` per unit.
    pub region_halfwidths: Vec<DVector<T>>,
}

impl<T: Scalar> EffectiveLinearization<T> {
    pub fn depth(&self) -> usize {
        self.masks.len()
    }

    /// Effective weight of the last linearized layer.
    pub fn w_eff(&self) -> &DMatrix<T> {
        self.effective_weights.last().unwrap()
    }

    /// Effective bias of the last linearized layer.
    pub fn b_eff(&self) -> &DVector<T> {
        self.effective_biases.last().unwrap()
    }

    /// Masked effective weight `W^(m)_l` (layer index 0-based).
    pub fn masked_weight(&self, layer: usize) -> DMatrix<T> {
        let mut w = self.effective_weights[layer].clone();
        for (mut row, &keep) in w.row_iter_mut().zip(self.masks[layer].iter()) {
            row *= keep;
        }
        w
    }

    pub fn masked_bias(&self, layer: usize) -> DVector<T> {
        self.effective_biases[layer].component_mul(&self.masks[layer])
    }

    /// `W^(m)_{n-1}`: the masked map feeding the last linearized layer
    /// (identity when there is only one layer).
    pub fn prev_weight(&self) -> DMatrix<T> {
        let d = self.depth();
        if d < 2 {
            let n = self.effective_weights[0].ncols();
            DMatrix::identity(n, n)
        } else {
            self.masked_weight(d - 2)
        }
    }

    /// `b^(m)_{n-1}`.
    pub fn prev_bias(&self) -> DVector<T> {
        let d = self.depth();
        if d < 2 {
            DVector::zeros(self.effective_weights[0].ncols())
        } else {
            self.masked_bias(d - 2)
        }
    }

    /// Smallest effective-bias magnitude among ReLU units.
    pub fn min_relu_halfwidth(&self) -> Option<T> {
        self.activations
            .iter()
            .zip(&self.region_halfwidths)
            .filter(|(a, _)| **a == Activation::Relu)
            .flat_map(|(_, h)| h.iter().copied())
            .reduce(|a, b| a.min(b))
    }

    /// Region membership: every ReLU layer keeps `|(W_l W^(m)_{l-1} x)_j|`
    /// within `min(m, m_{l,j})`, so no unit changes state.
    pub fn contains(&self, x: &DVector<T>) -> bool {
        self.activations
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == Activation::Relu)
            .all(|(l, _)| {
                let z = &self.effective_weights[l] * x;
                z.iter()
                    .zip(self.region_halfwidths[l].iter())
                    .all(|(zj, &hw)| zj.abs() <= hw.min(self.region_size))
            })
    }

    /// Largest `t` such that `t * dir` stays in the region.
    pub fn extent_along(&self, dir: &DVector<T>) -> T {
        let mut t = T::max_value().expect("bounded scalar");
        for (l, act) in self.activations.iter().enumerate() {
            if *act != Activation::Relu {
                continue;
            }
            let z = &self.effective_weights[l] * dir;
            for (zj, &hw) in z.iter().zip(self.region_halfwidths[l].iter()) {
                if zj.abs() > T::zero() {
                    t = t.min(hw.min(self.region_size) / zj.abs());
                }
            }
        }
        t
    }
}

/// Linearizes the whole network. Every hidden layer must be ReLU or identity.
pub fn effective_linearization<T: Scalar>(params: &NetworkParams<T>, m: T) -> Result<EffectiveLinearization<T>> {
    effective_linearization_prefix(params, params.depth(), m)
}

/// Linearizes the first `depth` layers, reporting the pre-activation of layer
/// `depth`. Layers before it must be piecewise linear; the last one may use
/// any activation (its own mask is only meaningful for ReLU).
pub fn effective_linearization_prefix<T: Scalar>(
    params: &NetworkParams<T>,
    depth: usize,
    m: T,
) -> Result<EffectiveLinearization<T>> {
    if depth == 0 || depth > params.depth() {
        return Err(dim_err("linearization depth", format!("1..={}", params.depth()), depth));
    }
    let input = params.input_dim();
    let mut prev_w = DMatrix::<T>::identity(input, input);
    let mut prev_b = DVector::<T>::zeros(input);
    let mut lin = EffectiveLinearization {
        region_size: m,
        activations: Vec::with_capacity(depth),
        masks: Vec::with_capacity(depth),
        effective_weights: Vec::with_capacity(depth),
        effective_biases: Vec::with_capacity(depth),
        region_halfwidths: Vec::with_capacity(depth),
    };
    for (l, layer) in params.layers[..depth].iter().enumerate() {
        let last = l + 1 == depth;
        if !last && !layer.activation.is_piecewise_linear() {
            return Err(Error::NotPiecewiseLinear(l));
        }
        let w_hat = &layer.weight * &prev_w;
        let b_hat = &layer.weight * &prev_b + &layer.bias;
        let mask = match layer.activation {
            Activation::Relu => b_hat.map(|b| if b > T::zero() { T::one() } else { T::zero() }),
            _ => DVector::from_element(b_hat.len(), T::one()),
        };
        prev_w = w_hat.clone();
        for (mut row, &keep) in prev_w.row_iter_mut().zip(mask.iter()) {
            row *= keep;
        }
        prev_b = b_hat.component_mul(&mask);
        lin.activations.push(layer.activation);
        lin.region_halfwidths.push(b_hat.map(|b| b.abs()));
        lin.masks.push(mask);
        lin.effective_weights.push(w_hat);
        lin.effective_biases.push(b_hat);
    }
    Ok(lin)
}

/// Whether `x` lies in the linear region described by `lin`.
pub fn in_linear_region<T: Scalar>(lin: &EffectiveLinearization<T>, params: &NetworkParams<T>, x: &DVector<T>) -> bool {
    x.len() == params.input_dim() && lin.contains(x)
}
