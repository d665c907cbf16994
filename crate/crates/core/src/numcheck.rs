//! Self-contained gradient verification suite: finite differences against every analytic
//! gradient, closed forms, and the correction-direction identities.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::Result;
use crate::eval::{correction_direction, finite_diff_check};
use crate::linalg::{dot, Matrix};
use crate::losses::{global_softmax_grad, local_loss_and_grad, LossSpec};
use crate::nn::{Activation, BackboneParams};
use crate::regularizers::{
    cosine_reg, on_normalized_columns, softmax_reg, softmax_reg_naive_value, StackedEmbeddings,
};
use crate::rng::{rng_for, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
pub const CLOSED_FORM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Largest error observed (relative for finite differences, absolute otherwise).
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            instances,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error < tolerance,
        }
    }
}

/// Stream tag for the suite's own random instances.
const STREAM: u64 = 0x6e75_6d63;

fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, r: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-r..r)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn uniform_vec(rng: &mut Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

/// Loss gradient with respect to the head and the feature, packed `[head, feature]`.
fn loss_fd(spec: &LossSpec, instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 1, i as u64);
        let (d, c) = (rng.random_range(2..7), rng.random_range(2..7));
        let w = uniform_matrix(&mut rng, d, c, 1.0);
        let x = uniform_vec(&mut rng, d, 1.0);
        let label = rng.random_range(0..c);
        let g = local_loss_and_grad(spec, &w, &x, label)?;
        let mut point = w.as_slice().to_vec();
        point.extend_from_slice(&x);
        let mut analytic = g.grad_embeddings.as_slice().to_vec();
        analytic.extend_from_slice(&g.grad_feature);
        let split = d * c;
        let report = finite_diff_check(
            |p| {
                let wp = Matrix::from_vec(d, c, p[..split].to_vec()).expect("shape");
                local_loss_and_grad(spec, &wp, &p[split..], label).map_or(f64::NAN, |g| g.loss)
            },
            &point,
            &analytic,
            FD_STEP,
            FD_TOL,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn global_fd(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 2, i as u64);
        let (d, c) = (rng.random_range(2..7), rng.random_range(4..13));
        let w = uniform_matrix(&mut rng, d, c, 1.0);
        let x = uniform_vec(&mut rng, d, 1.0);
        let label = rng.random_range(0..c);
        let g = global_softmax_grad(&w, &x, label)?;
        let report = finite_diff_check(
            |p| {
                let wp = Matrix::from_vec(d, c, p.to_vec()).expect("shape");
                global_softmax_grad(&wp, &x, label).map_or(f64::NAN, |g| g.loss)
            },
            w.as_slice(),
            g.grad_embeddings.as_slice(),
            FD_STEP,
            FD_TOL,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn random_stack(rng: &mut Rng, clients: usize, per_client: usize, d: usize, r: f64) -> StackedEmbeddings {
    let heads: Vec<Matrix> = (0..clients).map(|_| uniform_matrix(rng, d, per_client, r)).collect();
    StackedEmbeddings::stack(&heads).expect("uniform heads stack")
}

/// Regularizer value where every anchor occurrence is read from `frozen` and only the
/// negatives come from `live`.
fn frozen_anchor_value(frozen: &StackedEmbeddings, live: &Matrix) -> f64 {
    let owners = frozen.client_of();
    let mut value = 0.0;
    for a in 0..frozen.num_columns() {
        let anchor = frozen.w.col(a);
        let own = dot(&anchor, &anchor);
        let mut sum = 1.0;
        for v in 0..frozen.num_columns() {
            if owners[v] != owners[a] {
                sum += libm::exp(dot(&live.col(v), &anchor) - own);
            }
        }
        value += libm::log(sum);
    }
    value
}

fn softmax_reg_fd(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 3, i as u64);
        let emb = random_stack(&mut rng, 3, 2, 8, 0.6);
        let r = softmax_reg(&emb)?;
        let (d, n) = (emb.dim(), emb.num_columns());
        let report = finite_diff_check(
            |p| frozen_anchor_value(&emb, &Matrix::from_vec(d, n, p.to_vec()).expect("shape")),
            emb.w.as_slice(),
            r.grad.as_slice(),
            FD_STEP,
            FD_TOL,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// Largest gradient a single-client stack produces: every column is its own anchor and has
/// no negatives, so the own term must contribute nothing.
fn own_term_zero(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 4, i as u64);
        let emb = random_stack(&mut rng, 1, 4, 8, 2.0);
        let r = softmax_reg(&emb)?;
        worst = worst.max(r.value.abs());
        worst = r.grad.as_slice().iter().fold(worst, |m, g| m.max(g.abs()));
    }
    Ok(worst)
}

fn naive_vs_stable(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 5, i as u64);
        let emb = random_stack(&mut rng, 3, 2, 8, 0.5);
        let stable = softmax_reg(&emb)?.value;
        let naive = softmax_reg_naive_value(&emb, &[])?;
        worst = worst.max((stable - naive).abs());
    }
    Ok(worst)
}

fn cosine_reg_fd(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 6, i as u64);
        let emb = random_stack(&mut rng, 3, 2, 5, 1.0);
        let r = cosine_reg(&emb)?;
        let (d, n) = (emb.dim(), emb.num_columns());
        let owners = emb.client_of().to_vec();
        let report = finite_diff_check(
            |p| {
                let w = Matrix::from_vec(d, n, p.to_vec()).expect("shape");
                let mut v = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        if owners[a] != owners[b] {
                            v += w.col_dot(b, &w.col(a));
                        }
                    }
                }
                v
            },
            emb.w.as_slice(),
            r.grad.as_slice(),
            FD_STEP,
            FD_TOL,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// Chain rule through column normalization, checked against frozen-anchor differences of
/// the normalized regularizer.
fn normalized_reg_fd(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 7, i as u64);
        let emb = random_stack(&mut rng, 3, 2, 6, 1.5);
        let r = on_normalized_columns(&emb, softmax_reg)?;
        let mut frozen = emb.clone();
        frozen.w = emb.w.normalized_cols()?;
        let (d, n) = (emb.dim(), emb.num_columns());
        let report = finite_diff_check(
            |p| {
                let live = Matrix::from_vec(d, n, p.to_vec()).expect("shape");
                live.normalized_cols().map_or(f64::NAN, |w| frozen_anchor_value(&frozen, &w))
            },
            emb.w.as_slice(),
            r.grad.as_slice(),
            FD_STEP,
            FD_TOL,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn backbone_fd(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 8, i as u64);
        let activation = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let theta = BackboneParams::init(&[4, 5, 3], activation, &mut rng)?;
        let x = uniform_vec(&mut rng, 4, 1.0);
        let probe = uniform_vec(&mut rng, 3, 1.0);
        let (grads, _) = theta.backward(&x, &probe)?;
        let mut scratch = theta.clone();
        let report = finite_diff_check(
            |p| {
                scratch.assign_flat(p).expect("length");
                scratch.forward(&x).map_or(f64::NAN, |y| dot(&y, &probe))
            },
            &theta.flatten(),
            &grads.flatten(),
            FD_STEP,
            FD_TOL,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// Two-column, two-client stack `w_a = (1, 0)`, `w_b = (0, 1)`: each anchor's value is
/// `log(1 + e^{-1})` and the gradient on the other column is `σ(-1)·anchor`.
fn closed_forms() -> Result<f64> {
    let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let emb = StackedEmbeddings::new(w, vec![0, 1], 2)?;
    let r = softmax_reg(&emb)?;
    let sigma = 1.0 / (1.0 + libm::exp(1.0));
    let mut err = (r.value - 2.0 * libm::log(1.0 + libm::exp(-1.0))).abs();
    err = err.max((r.grad[(0, 1)] - sigma).abs()).max(r.grad[(1, 1)].abs());
    err = err.max((r.grad[(1, 0)] - sigma).abs()).max(r.grad[(0, 0)].abs());
    let loss = local_loss_and_grad(&LossSpec::softmax(), &Matrix::identity(2), &[1.0, 0.0], 0)?;
    err = err.max((loss.loss - libm::log(1.0 + libm::exp(-1.0))).abs());
    Ok(err)
}

/// Anchor replaced by the probe feature: the regularizer gradient on a cross-client
/// column must equal the feature form exactly.
fn substitution_identity(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = rng_for(seed, STREAM, 9, i as u64);
        let emb = random_stack(&mut rng, 3, 3, 6, 1.0);
        let feature = uniform_vec(&mut rng, 6, 1.0);
        for negative in 3..emb.num_columns() {
            let r = correction_direction(&emb, 1, &feature, negative)?;
            worst = worst.max(r.max_abs_diff_reg_vs_feature);
        }
    }
    Ok(worst)
}

/// Local logits of the probe's own client pushed far below the target: the feature form
/// and the centralized gradient then agree in magnitude.
fn well_trained_ratio() -> Result<f64> {
    let d = 4;
    let feature = vec![1.0, 0.0, 0.0, 0.0];
    let mut heads = vec![Matrix::zeros(d, 2), Matrix::zeros(d, 2)];
    heads[0].set_col(0, &[3.0, 0.0, 0.0, 0.0])?;
    heads[0].set_col(1, &[-45.0, 0.0, 0.0, 0.0])?;
    heads[1].set_col(0, &[0.5, 1.0, 0.0, 0.0])?;
    heads[1].set_col(1, &[1.0, 0.0, 1.0, 0.0])?;
    let emb = StackedEmbeddings::stack(&heads)?;
    let mut worst: f64 = 0.0;
    for negative in 2..4 {
        let r = correction_direction(&emb, 0, &feature, negative)?;
        worst = worst.max((r.magnitude_ratio - 1.0).abs());
    }
    Ok(worst)
}

/// Every check in a fixed order with `instances` random cases per randomized check.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let n = instances.max(1);
    Ok(vec![
        CheckResult::new("softmax loss fd", n, loss_fd(&LossSpec::softmax(), n, seed)?, FD_TOL),
        CheckResult::new("cosface loss fd", n, loss_fd(&LossSpec::cosface(), n, seed)?, FD_TOL),
        CheckResult::new("arcface loss fd", n, loss_fd(&LossSpec::arcface(), n, seed)?, FD_TOL),
        CheckResult::new("global softmax fd", n, global_fd(n, seed)?, FD_TOL),
        CheckResult::new("backbone fd", n, backbone_fd(n, seed)?, FD_TOL),
        CheckResult::new("softmax reg frozen-anchor fd", n, softmax_reg_fd(n, seed)?, FD_TOL),
        CheckResult::new("softmax reg own term", n, own_term_zero(n, seed)?, CLOSED_FORM_TOL),
        CheckResult::new("softmax reg naive vs stable", n, naive_vs_stable(n, seed)?, CLOSED_FORM_TOL),
        CheckResult::new("normalized reg chain rule fd", n, normalized_reg_fd(n, seed)?, FD_TOL),
        CheckResult::new("cosine reg fd", n, cosine_reg_fd(n, seed)?, FD_TOL),
        CheckResult::new("closed forms", 1, closed_forms()?, CLOSED_FORM_TOL),
        CheckResult::new("anchor substitution identity", n, substitution_identity(n, seed)?, 1e-12),
        CheckResult::new("well-trained magnitude ratio", 1, well_trained_ratio()?, 1e-6),
    ])
}
