//! Small fully-connected network engine.
//!
//! Hidden layers use ReLU; the output layer is identity or tanh. Batches are
//! flat row-major buffers of shape `(batch, dim)`. All arithmetic is `f64` and
//! single-threaded with a fixed summation order, so results are bit-for-bit
//! reproducible for a given seed and data order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("bad layer dims {0:?}: need at least two layers, each of width >= 1")]
    BadDims(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter shapes differ")]
    ShapeMismatch,
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Dense layer, weights stored row-major as `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    output_activation: OutputActivation,
}

/// Per-parameter values shaped like an [`Mlp`]: gradients and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBuffers {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Intermediates of a batched forward pass needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network output, shape `(batch, output_dim)`.
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    /// Parameter gradients summed over the batch.
    pub grads: ParamBuffers,
    /// Gradient with respect to the input, shape `(batch, input_dim)`.
    pub input_grad: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        sum += x * y;
    }
    sum
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Mlp {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::zeros(layer_dims, output_activation)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeros(layer_dims: &[usize], output_activation: OutputActivation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(NetError::BadDims(layer_dims.to_vec()));
        }
        let layers = layer_dims
            .windows(2)
            .map(|d| Layer {
                in_dim: d[0],
                out_dim: d[1],
                weights: vec![0.0; d[0] * d[1]],
                biases: vec![0.0; d[1]],
            })
            .collect();
        Ok(Mlp {
            layers,
            output_activation,
        })
    }

    /// Builds a network from explicit layers, checking that dims chain.
    pub fn from_layers(layers: Vec<Layer>, output_activation: OutputActivation) -> Result<Self> {
        let dims: Vec<usize> = layers
            .first()
            .map(|l| l.in_dim)
            .into_iter()
            .chain(layers.iter().map(|l| l.out_dim))
            .collect();
        let chained = layers.windows(2).all(|p| p[0].out_dim == p[1].in_dim);
        let sized = layers
            .iter()
            .all(|l| l.weights.len() == l.in_dim * l.out_dim && l.biases.len() == l.out_dim);
        if layers.is_empty() || !chained || !sized || dims.contains(&0) {
            return Err(NetError::BadDims(dims));
        }
        Ok(Mlp {
            layers,
            output_activation,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layer_dims() == other.layer_dims()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_batch(x, 1)?;
        Ok(cache.output().to_vec())
    }

    /// Batched forward pass over `batch` rows of `x`.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<ForwardCache> {
        let expected = batch * self.input_dim();
        if x.len() != expected {
            return Err(NetError::DimensionMismatch {
                expected,
                got: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &activations[l];
            let mut z = vec![0.0; batch * layer.out_dim];
            for b in 0..batch {
                let row = &input[b * layer.in_dim..(b + 1) * layer.in_dim];
                let out = &mut z[b * layer.out_dim..(b + 1) * layer.out_dim];
                for (o, zo) in out.iter_mut().enumerate() {
                    let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    *zo = layer.biases[o] + dot(row, w);
                }
            }
            let a: Vec<f64> = if l < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                match self.output_activation {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                }
            };
            pre.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            batch,
            activations,
            pre,
        })
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the batch output is `upstream` (shape `(batch, output_dim)`).
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Backward> {
        let batch = cache.batch;
        let expected = batch * self.output_dim();
        if upstream.len() != expected {
            return Err(NetError::DimensionMismatch {
                expected,
                got: upstream.len(),
            });
        }
        let mut grads = ParamBuffers::zeros_like(self);
        let last = self.layers.len() - 1;

        // delta = dL/dz for the current layer
        let mut delta: Vec<f64> = match self.output_activation {
            OutputActivation::Identity => upstream.to_vec(),
            OutputActivation::Tanh => upstream
                .iter()
                .zip(&cache.activations[last + 1])
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        };

        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let input = &cache.activations[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            let mut dx = vec![0.0; batch * layer.in_dim];
            for b in 0..batch {
                let x = &input[b * layer.in_dim..(b + 1) * layer.in_dim];
                let d = &delta[b * layer.out_dim..(b + 1) * layer.out_dim];
                let dxb = &mut dx[b * layer.in_dim..(b + 1) * layer.in_dim];
                for (o, &g) in d.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let range = o * layer.in_dim..(o + 1) * layer.in_dim;
                    axpy(&mut gw[range.clone()], g, x);
                    axpy(dxb, g, &layer.weights[range]);
                }
            }
            if l > 0 {
                // through the ReLU of the previous layer
                for (g, z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok(Backward {
            grads,
            input_grad: delta,
        })
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if !self.same_shape(online) {
            return Err(NetError::ShapeMismatch);
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (tw, ow) in t.weights.iter_mut().zip(&o.weights) {
                *tw = tau * ow + (1.0 - tau) * *tw;
            }
            for (tb, ob) in t.biases.iter_mut().zip(&o.biases) {
                *tb = tau * ob + (1.0 - tau) * *tb;
            }
        }
        Ok(())
    }

    /// Parameters in layer order, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                return &mut layer.weights[index];
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                return &mut layer.biases[index];
            }
            index -= layer.biases.len();
        }
        panic!("parameter index out of range");
    }
}

impl ParamBuffers {
    pub fn zeros_like(net: &Mlp) -> Self {
        ParamBuffers {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    pub fn matches(&self, net: &Mlp) -> bool {
        self.weights.len() == net.layers.len()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&net.layers)
                .all(|((w, b), l)| w.len() == l.weights.len() && b.len() == l.biases.len())
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Values in the same order as [`Mlp::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.values_mut() {
            *v *= k;
        }
    }

    pub fn add_assign(&mut self, other: &ParamBuffers) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(NetError::ShapeMismatch);
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            if a.len() != b.len() {
                return Err(NetError::ShapeMismatch);
            }
            axpy(a, 1.0, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if a.len() != b.len() {
                return Err(NetError::ShapeMismatch);
            }
            axpy(a, 1.0, b);
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamBuffers) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Bias-corrected Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: ParamBuffers,
    pub second_moment: ParamBuffers,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Fresh state with the usual β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        AdamState {
            first_moment: ParamBuffers::zeros_like(net),
            second_moment: ParamBuffers::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    /// One Adam step on `net` using `grads`.
    pub fn update(&mut self, net: &mut Mlp, grads: &ParamBuffers) -> Result<()> {
        if !grads.matches(net) || !self.first_moment.matches(net) {
            return Err(NetError::ShapeMismatch);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let groups = [
                (
                    &mut layer.weights,
                    &grads.weights[l],
                    &mut self.first_moment.weights[l],
                    &mut self.second_moment.weights[l],
                ),
                (
                    &mut layer.biases,
                    &grads.biases[l],
                    &mut self.first_moment.biases[l],
                    &mut self.second_moment.biases[l],
                ),
            ];
            for (params, g, m, v) in groups {
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Relative error with a denominator floor, so parameters whose true gradient
/// is tiny are compared on an absolute scale of `1e-3`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Step used by [`grad_check`] for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Compares `analytic` (gradients of `L = Σ output ⊙ upstream` at `x`)
/// against central differences of that loss over every parameter.
pub fn grad_check_against(
    net: &Mlp,
    x: &[f64],
    upstream: &[f64],
    analytic: &ParamBuffers,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let loss = |n: &Mlp| -> Result<f64> {
        let y = n.forward(x)?;
        Ok(y.iter().zip(upstream).map(|(a, b)| a * b).sum())
    };
    let analytic = analytic.flat();
    if analytic.len() != net.parameter_count() {
        return Err(NetError::ShapeMismatch);
    }
    let mut probe = net.clone();
    let mut max_rel_error: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.param_mut(i);
        *probe.param_mut(i) = original + GRAD_CHECK_STEP;
        let plus = loss(&probe)?;
        *probe.param_mut(i) = original - GRAD_CHECK_STEP;
        let minus = loss(&probe)?;
        *probe.param_mut(i) = original;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        max_rel_error = max_rel_error.max(relative_error(a, numeric));
    }
    Ok(GradCheckReport {
        max_rel_error,
        pass: max_rel_error < tolerance,
    })
}

/// Gradient check of [`Mlp::backward`] at `x` for the loss `L = Σ outputs`.
pub fn grad_check(net: &Mlp, x: &[f64], tolerance: f64) -> Result<GradCheckReport> {
    let upstream = vec![1.0; net.output_dim()];
    let cache = net.forward_batch(x, 1)?;
    let analytic = net.backward(&cache, &upstream)?.grads;
    grad_check_against(net, x, &upstream, &analytic, tolerance)
}

/// Smallest |pre-activation| of any hidden unit at `x`; values near zero put a
/// finite-difference probe across a ReLU kink.
pub fn min_abs_hidden_preactivation(net: &Mlp, x: &[f64]) -> Result<f64> {
    let cache = net.forward_batch(x, 1)?;
    let hidden = cache.pre.len() - 1;
    Ok(cache.pre[..hidden]
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, z| m.min(z.abs())))
}
