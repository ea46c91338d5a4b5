//! Small dense MLP with hand-written forward and backward passes.
//!
//! Used by the occupancy predictor, the prediction heads, and the seed
//! fusion layers. Gradients are exact; the finite-difference tests in this
//! module keep them honest.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("input length {got} does not match layer input {expected}")]
    DimMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major out×in.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// A stack of linear layers, each followed by its activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

/// Per-layer activation outputs retained for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Vec<f64>,
    /// Post-activation output of each layer.
    outputs: Vec<Vec<f64>>,
}

/// Parameter gradients, same shapes as the MLP itself.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Linear>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| Linear::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

impl Mlp {
    /// Shape chain `sizes[0] -> sizes[1] -> ...` with one activation per layer.
    pub fn new(sizes: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1);
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Linear::zeros(w[0], w[1]))
                .collect(),
            activations: activations.to_vec(),
        }
    }

    pub fn seeded(sizes: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Self {
        let mut m = Self::new(sizes, activations);
        for l in &mut m.layers {
            *l = Linear::seeded(l.in_dim, l.out_dim, rng);
        }
        m
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, MlpError> {
        Ok(self.forward_cached(input)?.1)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<(MlpCache, Vec<f64>), MlpError> {
        if input.len() != self.in_dim() {
            return Err(MlpError::DimMismatch {
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = input.to_vec();
        let mut pre = Vec::new();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            layer.forward_into(&current, &mut pre);
            current = pre.iter().map(|x| act.apply(*x)).collect();
            outputs.push(current.clone());
        }
        let out = current;
        Ok((
            MlpCache {
                input: input.to_vec(),
                outputs,
            },
            out,
        ))
    }

    /// Backpropagate `upstream` (d loss / d output). Accumulates parameter
    /// gradients into `grads` and returns the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        assert_eq!(upstream.len(), self.out_dim());
        let mut delta = upstream.to_vec();
        for (li, (layer, act)) in self
            .layers
            .iter()
            .zip(&self.activations)
            .enumerate()
            .rev()
        {
            let output = &cache.outputs[li];
            // d pre-activation
            for (d, y) in delta.iter_mut().zip(output) {
                *d *= act.derivative_from_output(*y);
            }
            let layer_input: &[f64] = if li == 0 {
                &cache.input
            } else {
                &cache.outputs[li - 1]
            };
            let g = &mut grads.layers[li];
            for o in 0..layer.out_dim {
                let d = delta[o];
                g.bias[o] += d;
                let row = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, x) in row.iter_mut().zip(layer_input) {
                    *gw += d * x;
                }
            }
            if li > 0 {
                let mut next = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                delta = next;
            } else {
                let mut input_grad = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (n, w) in input_grad.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                return input_grad;
            }
        }
        Vec::new()
    }

    /// Gradient-descent update: params -= lr · grads.
    pub fn apply_gradients(&mut self, grads: &MlpGrads, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weight.iter_mut().zip(&g.weight) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.weight.len() {
                return l.weight[idx];
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for l in &mut self.layers {
            if idx < l.weight.len() {
                l.weight[idx] = value;
                return;
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                l.bias[idx] = value;
                return;
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn grad_param(grads: &MlpGrads, mut idx: usize) -> f64 {
        for l in &grads.layers {
            if idx < l.weight.len() {
                return l.weight[idx];
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

/// Forward plus gradients w.r.t. parameters and input under an upstream
/// gradient, as a single call.
pub fn mlp_forward_backward(
    mlp: &Mlp,
    input: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, MlpGrads, Vec<f64>), MlpError> {
    let (cache, out) = mlp.forward_cached(input)?;
    let mut grads = MlpGrads::zeros_like(mlp);
    let input_grad = mlp.backward(&cache, upstream, &mut grads);
    Ok((out, grads, input_grad))
}

/// Central finite-difference gradient of `f` w.r.t. one MLP parameter.
pub fn finite_diff_param(mlp: &Mlp, idx: usize, eps: f64, mut f: impl FnMut(&Mlp) -> f64) -> f64 {
    let mut m = mlp.clone();
    let orig = m.get_param(idx);
    m.set_param(idx, orig + eps);
    let plus = f(&m);
    m.set_param(idx, orig - eps);
    let minus = f(&m);
    (plus - minus) / (2.0 * eps)
}
