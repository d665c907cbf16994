//! Classification losses over a class-embedding head, with analytic gradients.
//!
//! Heads carry no bias. The softmax variant uses raw dot products `W_jᵀx`; the margin
//! variants (CosFace, ArcFace) normalize both the feature and every embedding column
//! and multiply the resulting cosines by the scale `s`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{FeatureVector, Matrix};

/// Bound applied to the target cosine before `acos` in the ArcFace logit.
pub const ARCFACE_COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    Softmax,
    CosFace,
    ArcFace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub variant: LossVariant,
    /// Additive cosine margin (CosFace) or additive angular margin (ArcFace).
    pub margin: f64,
    pub scale: f64,
}

impl LossSpec {
    pub fn softmax() -> Self {
        LossSpec {
            variant: LossVariant::Softmax,
            margin: 0.0,
            scale: 1.0,
        }
    }

    pub fn cosface() -> Self {
        LossSpec {
            variant: LossVariant::CosFace,
            margin: 0.35,
            scale: 64.0,
        }
    }

    pub fn arcface() -> Self {
        LossSpec {
            variant: LossVariant::ArcFace,
            margin: 0.5,
            scale: 64.0,
        }
    }

    /// Whether features and embeddings are L2-normalized before the logits.
    pub fn normalizes(&self) -> bool {
        !matches!(self.variant, LossVariant::Softmax)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("loss margin must be finite and >= 0".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("loss scale must be finite and > 0".into()));
        }
        Ok(())
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::softmax()
    }
}

/// Loss value together with gradients w.r.t. the feature and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_feature: FeatureVector,
    pub grad_embeddings: Matrix,
}

/// `log softmax` via max subtraction.
pub fn stable_log_softmax(logits: &[f64]) -> FeatureVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return FeatureVector(logits.iter().map(|_| f64::NAN).collect());
    }
    let sum: f64 = logits.iter().map(|&z| libm::exp(z - max)).sum();
    let lse = max + libm::log(sum);
    FeatureVector(logits.iter().map(|&z| z - lse).collect())
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::LabelOutOfRange { label, classes })
    }
}

fn check_feature(head: &Matrix, x: &[f64]) -> Result<()> {
    if head.rows() != x.len() {
        return Err(Error::ShapeMismatch {
            context: "feature vs head rows",
            expected: head.rows(),
            found: x.len(),
        });
    }
    if head.cols() == 0 {
        return Err(Error::Empty("class-embedding head"));
    }
    Ok(())
}

/// Softmax cross-entropy over raw logits `Wᵀx`, shared by the local and global forms.
fn softmax_ce(w: &Matrix, x: &[f64], label: usize) -> Result<LossGrad> {
    check_feature(w, x)?;
    check_label(label, w.cols())?;
    let logits = w.matvec_t(x)?;
    let log_p = stable_log_softmax(&logits);
    let loss = -log_p[label];
    let coeff: Vec<f64> = log_p
        .iter()
        .enumerate()
        .map(|(j, &lp)| libm::exp(lp) - if j == label { 1.0 } else { 0.0 })
        .collect();
    let mut grad_w = Matrix::zeros(w.rows(), w.cols());
    for (r, &xr) in x.iter().enumerate() {
        for (j, &c) in coeff.iter().enumerate() {
            grad_w[(r, j)] = c * xr;
        }
    }
    let grad_x = w.matvec(&coeff)?;
    Ok(LossGrad {
        loss,
        grad_feature: FeatureVector(grad_x),
        grad_embeddings: grad_w,
    })
}

fn margin_loss(spec: &LossSpec, w: &Matrix, x: &[f64], label: usize) -> Result<LossGrad> {
    check_feature(w, x)?;
    check_label(label, w.cols())?;
    let xn = crate::linalg::norm(x);
    if xn == 0.0 {
        return Err(Error::Degenerate("zero-norm feature under a normalizing loss"));
    }
    let classes = w.cols();
    let d = w.rows();
    let x_hat: Vec<f64> = x.iter().map(|v| v / xn).collect();
    let mut w_norm = Vec::with_capacity(classes);
    let mut cos = Vec::with_capacity(classes);
    for j in 0..classes {
        let n = w.col_norm(j);
        if n == 0.0 {
            return Err(Error::Degenerate("zero-norm embedding column under a normalizing loss"));
        }
        w_norm.push(n);
        cos.push(w.col_dot(j, &x_hat) / n);
    }
    let s = spec.scale;
    let m = spec.margin;
    let mut logits: Vec<f64> = cos.iter().map(|&c| s * c).collect();
    // d(logit_y)/d(cos_y)
    let target_slope = match spec.variant {
        LossVariant::CosFace => {
            logits[label] = s * (cos[label] - m);
            s
        }
        LossVariant::ArcFace => {
            let c = cos[label];
            let cc = c.clamp(-ARCFACE_COS_CLAMP, ARCFACE_COS_CLAMP);
            let theta = libm::acos(cc);
            logits[label] = s * libm::cos(theta + m);
            if c == cc {
                // d/dc cos(acos(c) + m) = cos m + sin m · c / sqrt(1 - c²)
                s * (libm::cos(m) + libm::sin(m) * cc / libm::sqrt(1.0 - cc * cc))
            } else {
                0.0
            }
        }
        LossVariant::Softmax => unreachable!("softmax handled by softmax_ce"),
    };
    let log_p = stable_log_softmax(&logits);
    let loss = -log_p[label];
    let mut grad_x = alloc::vec![0.0; d];
    let mut grad_w = Matrix::zeros(d, classes);
    for j in 0..classes {
        let dl_dlogit = libm::exp(log_p[j]) - if j == label { 1.0 } else { 0.0 };
        let slope = if j == label { target_slope } else { s };
        let g = dl_dlogit * slope;
        if g == 0.0 {
            continue;
        }
        let c = cos[j];
        let wn = w_norm[j];
        for r in 0..d {
            let w_hat = w[(r, j)] / wn;
            grad_x[r] += g * (w_hat - c * x_hat[r]) / xn;
            grad_w[(r, j)] = g * (x_hat[r] - c * w_hat) / wn;
        }
    }
    Ok(LossGrad {
        loss,
        grad_feature: FeatureVector(grad_x),
        grad_embeddings: grad_w,
    })
}

/// Loss of one sample against a client's own head `W_k` over its local class space.
pub fn local_loss_and_grad(spec: &LossSpec, head: &Matrix, x: &[f64], label: usize) -> Result<LossGrad> {
    match spec.variant {
        LossVariant::Softmax => softmax_ce(head, x, label),
        _ => margin_loss(spec, head, x, label),
    }
}

/// Standard softmax gradient over the full class space; the centralized reference.
pub fn global_softmax_grad(w: &Matrix, x: &[f64], global_label: usize) -> Result<LossGrad> {
    softmax_ce(w, x, global_label)
}
