//! SGD with classic momentum and L2 weight decay folded into the velocity.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, num_params: usize) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be finite and >= 0".into()));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// `v ← μ·v + g + λ_wd·θ`, then `θ ← θ − η·v`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("sgd params", self.velocity.len(), params.len())?;
        check_len("sgd grads", self.velocity.len(), grads.len())?;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.learning_rate * *v;
        }
        Ok(())
    }
}
