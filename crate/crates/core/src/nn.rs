//! Feed-forward embedding backbone `G(x; θ)` with an explicit backward pass.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};
use crate::linalg::{FeatureVector, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => libm::tanh(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
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
        }
    }
}

/// One affine layer: `y = W x + b`, `W` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: FeatureVector,
}

/// Backbone parameters `θ`. The activation is applied after every layer except the last,
/// so the final layer emits the embedding linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediate values recorded by [`BackboneParams::forward_trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> FeatureVector {
        FeatureVector(self.inputs.last().cloned().unwrap_or_default())
    }
}

impl BackboneParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("backbone layers"));
        }
        for l in &layers {
            check_len("layer bias", l.weight.rows(), l.bias.dim())?;
        }
        for pair in layers.windows(2) {
            check_len("layer chain", pair[0].weight.rows(), pair[1].weight.cols())?;
        }
        Ok(BackboneParams { layers, activation })
    }

    /// Seeded init: weights `N(0, 1/fan_in)`, zero biases. `dims` lists the width of every
    /// layer boundary starting with the input, e.g. `[input, hidden, embedding]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("backbone needs at least input and output dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::Config("backbone dims must be positive".into()));
            }
            let normal = Normal::new(0.0, 1.0 / libm::sqrt(fan_in as f64))
                .map_err(|_| Error::Config("bad init std".into()))?;
            let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            layers.push(Layer {
                weight: Matrix::from_vec(fan_out, fan_in, data)?,
                bias: FeatureVector::zeros(fan_out),
            });
        }
        BackboneParams::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.layers.len() + 1);
        d.push(self.input_dim());
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.dim())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        BackboneParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: FeatureVector::zeros(l.bias.dim()),
                })
                .collect(),
            activation: self.activation,
        }
    }

    /// All parameters in layer order, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", self.num_params(), flat.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let b = &mut l.bias;
            let n = b.dim();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<FeatureVector> {
        Ok(self.forward_trace(x)?.output())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        check_len("backbone input", self.input_dim(), x.len())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(last);
        inputs.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weight.matvec(&inputs[i])?;
            for (zi, bi) in z.iter_mut().zip(l.bias.iter()) {
                *zi += bi;
            }
            if i < last {
                let a = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
                inputs.push(a);
            } else {
                inputs.push(z);
            }
        }
        Ok(ForwardTrace { inputs, pre })
    }

    /// Gradients of `⟨grad_out, G(x)⟩` with respect to the parameters and to `x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(BackboneParams, FeatureVector)> {
        let trace = self.forward_trace(x)?;
        let mut grads = self.zeros_like();
        let gx = self.backward_accumulate(&trace, grad_out, 1.0, &mut grads)?;
        Ok((grads, gx))
    }

    /// Adds `scale · ∂⟨grad_out, G(x)⟩/∂θ` into `grads` and returns the input gradient.
    pub fn backward_accumulate(
        &self,
        trace: &ForwardTrace,
        grad_out: &[f64],
        scale: f64,
        grads: &mut BackboneParams,
    ) -> Result<FeatureVector> {
        check_len("backbone grad_out", self.output_dim(), grad_out.len())?;
        check_len("gradient buffer", self.num_params(), grads.num_params())?;
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                let a = &trace.inputs[i + 1];
                for ((d, &z), &av) in delta.iter_mut().zip(&trace.pre[i]).zip(a) {
                    *d *= self.activation.derivative(z, av);
                }
            }
            let input = &trace.inputs[i];
            let g = &mut grads.layers[i];
            let cols = g.weight.cols();
            let gw = g.weight.as_mut_slice();
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let sd = scale * d;
                for (w, &xin) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                    *w += sd * xin;
                }
                g.bias[r] += sd;
            }
            delta = self.layers[i].weight.matvec_t(&delta)?;
        }
        Ok(FeatureVector(delta))
    }
}
