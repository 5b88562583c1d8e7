//! Fully-connected network with exact backpropagation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{data_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    /// Only meaningful for single-layer (linear) models.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => libm::tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One affine layer: `out = W · in + b`, `W` is out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { weights: Matrix::zeros(outputs, inputs), biases: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.biases.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.as_mut_slice().iter_mut().chain(self.biases.iter_mut())
    }
}

/// Multi-layer perceptron; hidden layers use `activation`, the output layer
/// is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    layers: Vec<Dense>,
    activation: Activation,
}

/// Number of parameters of a fully-connected chain: `Σ (out·in + out)`.
pub fn parameter_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl MlpModel {
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(alloc::format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(MlpModel { dims: dims.to_vec(), layers, activation })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(dims, activation)?;
        for layer in &mut m.layers {
            let limit = libm::sqrt(6.0 / (layer.inputs() + layer.outputs()) as f64);
            for w in layer.weights.as_mut_slice() {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(m)
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].inputs()];
        for (i, l) in layers.iter().enumerate() {
            if l.inputs() != *dims.last().unwrap() || l.biases.len() != l.outputs() {
                return Err(Error::Config(alloc::format!("layer {i} does not chain")));
            }
            dims.push(l.outputs());
        }
        Ok(MlpModel { dims, layers, activation })
    }

    /// Rebuilds a model from the flat parameter order of [`Self::parameters`].
    pub fn from_parameters(dims: &[usize], activation: Activation, params: &[f64]) -> Result<Self> {
        let mut m = Self::zeros(dims, activation)?;
        if params.len() != m.parameter_count() {
            return Err(data_err!(
                "expected {} parameters, got {}",
                m.parameter_count(),
                params.len()
            ));
        }
        for (dst, &src) in m.parameters_mut().zip(params) {
            *dst = src;
        }
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.dims)
    }

    /// Parameters in layer order; within a layer, weights row-major then biases.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::params)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::params_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|p| p.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(data_err!("input has {} values, model expects {}", x.len(), self.n_inputs()));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(data_err!("non-finite input at feature {j}"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.mul_vec(&a);
            for (zi, b) in z.iter_mut().zip(&layer.biases) {
                *zi += b;
            }
            if i < last {
                for zi in &mut z {
                    *zi = self.activation.apply(*zi);
                }
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass keeping what backpropagation needs.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.mul_vec(&a);
            for (zi, b) in z.iter_mut().zip(&layer.biases) {
                *zi += b;
            }
            let next = if i < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok(Trace { inputs, pre, output: a })
    }

    /// Accumulates `scale ·` gradients of a scalar loss whose gradient with
    /// respect to the output is `grad_out`. Returns the input gradient.
    pub fn backward_into(
        &self,
        trace: &Trace,
        grad_out: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.n_outputs());
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // delta currently holds dL/da for layer i's output
                let outs = &trace.inputs[i + 1];
                for ((d, &z), &a) in delta.iter_mut().zip(&trace.pre[i]).zip(outs) {
                    *d *= self.activation.derivative(z, a);
                }
            }
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let input = &trace.inputs[i];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let sd = scale * d;
                g.biases[r] += sd;
                for (gw, &x) in g.weights.row_mut(r).iter_mut().zip(input) {
                    *gw += sd * x;
                }
            }
            delta = layer.weights.tr_mul_vec(&delta);
        }
        delta
    }

    /// Gradients of a single example (unscaled) and the input gradient.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64]) -> (Gradients, Vec<f64>) {
        let mut g = Gradients::zeros_like(self);
        let dx = self.backward_into(trace, grad_out, 1.0, &mut g);
        (g, dx)
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of every layer (the first is the network input).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Parameter-shaped gradient (or accumulator) storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::params)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::params_mut)
    }

    pub fn fill_zero(&mut self) {
        for v in self.values_mut() {
            *v = 0.0;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values_mut() {
            *v *= s;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Momentum { beta: f64 },
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub kind: OptimKind,
    velocity: Option<Gradients>,
}

impl OptimState {
    pub fn new(learning_rate: f64, kind: OptimKind) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(alloc::format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        if let OptimKind::Momentum { beta } = kind {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(alloc::format!("momentum beta {beta} outside [0, 1)")));
            }
        }
        Ok(OptimState { learning_rate, kind, velocity: None })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, OptimKind::Sgd)
    }

    pub fn momentum(learning_rate: f64, beta: f64) -> Result<Self> {
        Self::new(learning_rate, OptimKind::Momentum { beta })
    }
}

/// Applies one update. Parameters are left untouched when the update would
/// make any of them non-finite.
pub fn step(model: &mut MlpModel, grads: &Gradients, optim: &mut OptimState) -> Result<()> {
    let lr = optim.learning_rate;
    let update: Vec<f64> = match optim.kind {
        OptimKind::Sgd => grads.values().map(|g| lr * g).collect(),
        OptimKind::Momentum { beta } => {
            let v = optim.velocity.get_or_insert_with(|| Gradients::zeros_like(model));
            if v.layers.len() != grads.layers.len() {
                return Err(Error::Internal("optimizer state does not match the model".into()));
            }
            for (vi, g) in v.values_mut().zip(grads.values()) {
                *vi = beta * *vi + g;
            }
            v.values().map(|vi| lr * vi).collect()
        }
    };
    let bad = model.parameters().zip(&update).position(|(p, u)| !(p - u).is_finite());
    if let Some(idx) = bad {
        return Err(Error::Training {
            epoch: 0,
            message: alloc::format!("parameter {idx} became non-finite"),
        });
    }
    for (p, u) in model.parameters_mut().zip(update) {
        *p -= u;
    }
    Ok(())
}
