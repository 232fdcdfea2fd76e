//! Fully connected feedforward networks with hand-written backpropagation.
//!
//! Batches are stored column-wise: an input batch is `input_dim x N`.

mod checkpoint;
mod linear;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::scalar::{lit, Scalar};

pub use checkpoint::{read_network, write_network, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use linear::{effective_linearization, effective_linearization_prefix, in_linear_region, EffectiveLinearization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Swish,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Swish => z * sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s + z * s * (T::one() - s)
            }
            Activation::Identity => T::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Swish => "swish",
            Activation::Identity => "identity",
        }
    }

    /// ReLU and identity layers are exactly piecewise linear.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "swish" => Ok(Activation::Swish),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Scalar> {
    /// `out x in`.
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Weights, biases and activations of a feedforward network, plus a
/// per-output scale applied after the final activation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Scalar> {
    pub layers: Vec<Layer<T>>,
    pub output_scale: DVector<T>,
}

/// Inverted dropout on hidden-layer outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, seed })
    }
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    /// Input to each layer (after dropout of the previous layer).
    pub inputs: Vec<DMatrix<T>>,
    /// Pre-activation of each layer.
    pub pre_activations: Vec<DMatrix<T>>,
    /// Dropout multipliers applied to each hidden layer's output.
    pub dropout_masks: Vec<Option<DMatrix<T>>>,
    pub output: DMatrix<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Final-layer pre-activation (pre-tanh output of an actor).
    pub fn pre_output(&self) -> &DMatrix<T> {
        self.pre_activations.last().expect("network has layers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
    /// Gradient with respect to the input batch.
    pub input: DMatrix<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &NetworkParams<T>, batch: usize) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: params.layers.iter().map(|l| DVector::zeros(l.out_dim())).collect(),
            input: DMatrix::zeros(params.input_dim(), batch),
        }
    }

    /// Parameter gradients in the same order as [`NetworkParams::tensors_mut`].
    pub fn tensors(&self) -> impl Iterator<Item = &[T]> {
        self.weights
            .iter()
            .map(|w| w.as_slice())
            .chain(self.biases.iter().map(|b| b.as_slice()))
    }

    /// `self += scale * other` over parameter gradients (input gradient untouched).
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b * scale;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b * scale;
        }
    }
}

impl<T: Scalar> NetworkParams<T> {
    pub fn new(layers: Vec<Layer<T>>, output_scale: DVector<T>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(dim_err("layer bias", l.out_dim(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(dim_err("layer input", layers[i - 1].out_dim(), l.in_dim()));
            }
        }
        let out = layers.last().unwrap().out_dim();
        if output_scale.len() != out {
            return Err(dim_err("output_scale", out, output_scale.len()));
        }
        Ok(Self { layers, output_scale })
    }

    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    ///
    /// `sizes` lists every width from input to output; `activations` has one
    /// tag per layer.
    pub fn init_uniform<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        output_scale: DVector<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(dim_err("activation count", sizes.len().saturating_sub(1), activations.len()));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || lit::<T>(rng.random_range(-bound..bound));
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| draw());
                let bias = DVector::from_fn(fan_out, |_, _| draw());
                Layer { weight, bias, activation: act }
            })
            .collect();
        Self::new(layers, output_scale)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn last_layer(&self) -> &Layer<T> {
        self.layers.last().unwrap()
    }

    /// Mutable parameter storage: every weight matrix, then every bias vector.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        let (ws, bs): (Vec<_>, Vec<_>) = self
            .layers
            .iter_mut()
            .map(|l| (l.weight.as_mut_slice(), l.bias.as_mut_slice()))
            .unzip();
        ws.into_iter().chain(bs)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice())
            .chain(self.layers.iter().map(|l| l.bias.as_slice()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    /// Smallest stored bias magnitude over all layers.
    pub fn min_abs_bias(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.bias.iter())
            .fold(T::max_value().expect("bounded scalar"), |acc, b| acc.min(b.abs()))
    }

    /// Batched forward pass.
    pub fn forward_batch(&self, x: &DMatrix<T>, dropout: Option<&DropoutSpec>) -> Result<ForwardCache<T>> {
        if x.nrows() != self.input_dim() {
            return Err(dim_err("network input", self.input_dim(), x.nrows()));
        }
        let n = self.depth();
        let mut rng = dropout
            .filter(|d| d.rate > 0.0)
            .map(|d| (ChaCha8Rng::seed_from_u64(d.seed), d.rate));
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut dropout_masks = Vec::with_capacity(n);
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &current;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let mut h = z.map(|v| layer.activation.apply(v));
            let mask = match (&mut rng, i + 1 < n) {
                (Some((rng, rate)), true) => {
                    let keep = lit::<T>(1.0 / (1.0 - *rate));
                    let mask = DMatrix::from_fn(h.nrows(), h.ncols(), |_, _| {
                        if rng.random::<f64>() < *rate {
                            T::zero()
                        } else {
                            keep
                        }
                    });
                    h.component_mul_assign(&mask);
                    Some(mask)
                }
                _ => None,
            };
            inputs.push(std::mem::replace(&mut current, h));
            pre_activations.push(z);
            dropout_masks.push(mask);
        }
        for (mut row, &s) in current.row_iter_mut().zip(self.output_scale.iter()) {
            row *= s;
        }
        Ok(ForwardCache {
            inputs,
            pre_activations,
            dropout_masks,
            output: current,
        })
    }

    /// Single-sample forward pass returning `(output, per-layer pre-activations)`.
    pub fn forward(&self, x: &DVector<T>, dropout: Option<&DropoutSpec>) -> Result<(DVector<T>, Vec<DVector<T>>)> {
        let batch = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let cache = self.forward_batch(&batch, dropout)?;
        let pre = cache
            .pre_activations
            .iter()
            .map(|z| z.column(0).into_owned())
            .collect();
        Ok((cache.output.column(0).into_owned(), pre))
    }

    /// Deterministic evaluation (no dropout).
    pub fn eval(&self, x: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.forward(x, None)?.0)
    }

    /// Final-layer pre-activation for one input.
    pub fn pre_output(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let (_, mut pre) = self.forward(x, None)?;
        Ok(pre.pop().expect("network has layers"))
    }

    /// Backpropagates `upstream` (gradient w.r.t. the scaled output, `out x N`).
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &DMatrix<T>) -> Result<Gradients<T>> {
        let out = self.output_dim();
        let batch = cache.output.ncols();
        if upstream.shape() != (out, batch) {
            return Err(dim_err("upstream gradient", format!("{out}x{batch}"), format!("{:?}", upstream.shape())));
        }
        if cache.pre_activations.len() != self.depth() {
            return Err(dim_err("forward cache depth", self.depth(), cache.pre_activations.len()));
        }
        let n = self.depth();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut grad = upstream.clone();
        for (mut row, &s) in grad.row_iter_mut().zip(self.output_scale.iter()) {
            row *= s;
        }
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let z = &cache.pre_activations[i];
            if let Some(mask) = &cache.dropout_masks[i] {
                grad.component_mul_assign(mask);
            }
            grad.zip_apply(z, |g, zv| *g *= layer.activation.derivative(zv));
            weights.push(&grad * cache.inputs[i].transpose());
            biases.push(grad.column_sum());
            grad = layer.weight.transpose() * &grad;
        }
        weights.reverse();
        biases.reverse();
        Ok(Gradients {
            weights,
            biases,
            input: grad,
        })
    }

    /// Polyak averaging `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &NetworkParams<T>, tau: T) -> Result<()> {
        if self.depth() != source.depth()
            || self
                .layers
                .iter()
                .zip(&source.layers)
                .any(|(a, b)| a.weight.shape() != b.weight.shape())
        {
            return Err(dim_err("target network shape", "matching layers", "different layers"));
        }
        let keep = T::one() - tau;
        let src: Vec<&[T]> = source.tensors().collect();
        for (dst, src) in self.tensors_mut().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = tau * s + keep * *d;
            }
        }
        Ok(())
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let conv = |v: &T| lit::<U>(crate::scalar::to_f64(*v));
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.map(|v| conv(&v)),
                    bias: l.bias.map(|v| conv(&v)),
                    activation: l.activation,
                })
                .collect(),
            output_scale: self.output_scale.map(|v| conv(&v)),
        }
    }
}
