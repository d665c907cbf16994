//! Server-side regularizers on the stacked class-embedding matrix.
//!
//! Every column acts once as an *anchor*. The anchor's occurrences are constants
//! (stop-gradient), so gradient only flows into the cross-client columns that appear in
//! the anchor's denominator. Columns shared by several clients carry the whole sharing
//! group as their client set, and a pair of columns interacts only when their client
//! sets are disjoint.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// `W̃ = [W_1, …, W_K]`, one column per class, tagged with the owning client.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedEmbeddings {
    pub w: Matrix,
    client_of: Vec<usize>,
    num_clients: usize,
    anchor_mask: Option<Vec<bool>>,
}

/// A column whose identity is held by every client in `clients`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedGroup {
    pub column: usize,
    pub clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegGrad {
    pub value: f64,
    pub grad: Matrix,
}

impl StackedEmbeddings {
    pub fn new(w: Matrix, client_of: Vec<usize>, num_clients: usize) -> Result<Self> {
        if client_of.len() != w.cols() {
            return Err(Error::ShapeMismatch {
                context: "client_of vs columns",
                expected: w.cols(),
                found: client_of.len(),
            });
        }
        if let Some(&bad) = client_of.iter().find(|&&k| k >= num_clients) {
            return Err(Error::Config(alloc::format!(
                "column assigned to client {bad} but only {num_clients} clients exist"
            )));
        }
        Ok(StackedEmbeddings {
            w,
            client_of,
            num_clients,
            anchor_mask: None,
        })
    }

    /// Stacks per-client heads in client order.
    pub fn stack(heads: &[Matrix]) -> Result<Self> {
        let d = heads.first().map_or(0, |h| h.rows());
        let total: usize = heads.iter().map(|h| h.cols()).sum();
        let mut w = Matrix::zeros(d, total);
        let mut client_of = Vec::with_capacity(total);
        let mut j = 0;
        for (k, h) in heads.iter().enumerate() {
            if h.rows() != d {
                return Err(Error::ShapeMismatch {
                    context: "head embedding dim",
                    expected: d,
                    found: h.rows(),
                });
            }
            for c in 0..h.cols() {
                w.set_col(j, &h.col(c))?;
                client_of.push(k);
                j += 1;
            }
        }
        StackedEmbeddings::new(w, client_of, heads.len())
    }

    /// Restricts which columns serve as anchors. Masked-out columns still act as negatives.
    pub fn with_anchor_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.w.cols() {
            return Err(Error::ShapeMismatch {
                context: "anchor mask",
                expected: self.w.cols(),
                found: mask.len(),
            });
        }
        self.anchor_mask = Some(mask);
        Ok(self)
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn num_columns(&self) -> usize {
        self.w.cols()
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn client_of(&self) -> &[usize] {
        &self.client_of
    }

    pub fn is_anchor(&self, j: usize) -> bool {
        self.anchor_mask.as_ref().is_none_or(|m| m[j])
    }

    pub fn client_columns(&self, k: usize) -> Vec<usize> {
        (0..self.client_of.len())
            .filter(|&j| self.client_of[j] == k)
            .collect()
    }

    pub fn head(&self, k: usize) -> Matrix {
        self.w.select_cols(&self.client_columns(k))
    }

    pub fn set_head(&mut self, k: usize, head: &Matrix) -> Result<()> {
        let cols = self.client_columns(k);
        if cols.len() != head.cols() {
            return Err(Error::ShapeMismatch {
                context: "client head columns",
                expected: cols.len(),
                found: head.cols(),
            });
        }
        for (c, &j) in cols.iter().enumerate() {
            self.w.set_col(j, &head.col(c))?;
        }
        Ok(())
    }

    /// Client set of each column after applying the shared groups.
    pub fn client_sets(&self, groups: &[SharedGroup]) -> Result<Vec<Vec<usize>>> {
        let mut sets: Vec<Vec<usize>> = self.client_of.iter().map(|&k| vec![k]).collect();
        for g in groups {
            if g.column >= sets.len() {
                return Err(Error::Config(alloc::format!(
                    "shared group references column {} of {}",
                    g.column,
                    sets.len()
                )));
            }
            if !g.clients.contains(&self.client_of[g.column]) {
                return Err(Error::Config(alloc::format!(
                    "shared group for column {} does not contain its owner client {}",
                    g.column,
                    self.client_of[g.column]
                )));
            }
            if let Some(&bad) = g.clients.iter().find(|&&k| k >= self.num_clients) {
                return Err(Error::Config(alloc::format!("shared group names unknown client {bad}")));
            }
            let mut s = g.clients.clone();
            s.sort_unstable();
            s.dedup();
            sets[g.column] = s;
        }
        Ok(sets)
    }

    fn check_finite(&self) -> Result<()> {
        if self.w.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("stacked embeddings"))
        }
    }
}

fn disjoint(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Equal => return false,
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
        }
    }
    true
}

/// Negatives of every anchor: columns whose client set is disjoint from the anchor's.
fn negative_lists(emb: &StackedEmbeddings, sets: &[Vec<usize>]) -> Vec<Vec<usize>> {
    (0..emb.num_columns())
        .map(|a| {
            (0..emb.num_columns())
                .filter(|&v| v != a && disjoint(&sets[a], &sets[v]))
                .collect()
        })
        .collect()
}

/// Softmax regularizer over every anchor, evaluated as
/// `log(1 + Σ_v exp(vᵀa − ‖a‖²))` with the exponent maximum factored out.
pub fn softmax_reg(emb: &StackedEmbeddings) -> Result<RegGrad> {
    masked_softmax_reg(emb, &[])
}

/// Softmax regularizer where shared columns only interact with clients outside their group.
pub fn masked_softmax_reg(emb: &StackedEmbeddings, groups: &[SharedGroup]) -> Result<RegGrad> {
    emb.check_finite()?;
    let sets = emb.client_sets(groups)?;
    let negatives = negative_lists(emb, &sets);
    let cols: Vec<Vec<f64>> = (0..emb.num_columns()).map(|j| emb.w.col(j)).collect();
    let mut grad = Matrix::zeros(emb.dim(), emb.num_columns());
    let mut value = 0.0;
    let mut shifted = Vec::new();
    for (a, negs) in negatives.iter().enumerate() {
        if !emb.is_anchor(a) || negs.is_empty() {
            continue;
        }
        let anchor = &cols[a];
        let self_term = dot(anchor, anchor);
        shifted.clear();
        shifted.extend(negs.iter().map(|&v| dot(&cols[v], anchor) - self_term));
        let m = shifted.iter().copied().fold(0.0, f64::max);
        let denom = libm::exp(-m) + shifted.iter().map(|&t| libm::exp(t - m)).sum::<f64>();
        value += m + libm::log(denom);
        for (&v, &t) in negs.iter().zip(&shifted) {
            grad.add_to_col(v, libm::exp(t - m) / denom, anchor);
        }
    }
    Ok(RegGrad { value, grad })
}

/// The regularizer value written literally as `−log(e^{aᵀa} / (e^{aᵀa} + Σ e^{vᵀa}))`.
/// Overflows for large norms; kept for small-scale cross-checks.
pub fn softmax_reg_naive_value(emb: &StackedEmbeddings, groups: &[SharedGroup]) -> Result<f64> {
    emb.check_finite()?;
    let sets = emb.client_sets(groups)?;
    let negatives = negative_lists(emb, &sets);
    let mut value = 0.0;
    for (a, negs) in negatives.iter().enumerate() {
        if !emb.is_anchor(a) {
            continue;
        }
        let anchor = emb.w.col(a);
        let own = libm::exp(dot(&anchor, &anchor));
        let cross: f64 = negs
            .iter()
            .map(|&v| libm::exp(dot(&emb.w.col(v), &anchor)))
            .sum();
        value += -libm::log(own / (own + cross));
    }
    Ok(value)
}

/// Sum of cross-client dot products, each unordered pair once per anchor.
pub fn cosine_reg(emb: &StackedEmbeddings) -> Result<RegGrad> {
    masked_cosine_reg(emb, &[])
}

pub fn masked_cosine_reg(emb: &StackedEmbeddings, groups: &[SharedGroup]) -> Result<RegGrad> {
    emb.check_finite()?;
    let sets = emb.client_sets(groups)?;
    let negatives = negative_lists(emb, &sets);
    let cols: Vec<Vec<f64>> = (0..emb.num_columns()).map(|j| emb.w.col(j)).collect();
    let mut grad = Matrix::zeros(emb.dim(), emb.num_columns());
    let mut value = 0.0;
    for (a, negs) in negatives.iter().enumerate() {
        if !emb.is_anchor(a) {
            continue;
        }
        for &v in negs {
            value += dot(&cols[v], &cols[a]);
            grad.add_to_col(v, 1.0, &cols[a]);
            grad.add_to_col(a, 1.0, &cols[v]);
        }
    }
    Ok(RegGrad { value, grad })
}

/// Evaluates `reg` on unit-normalized columns and maps the gradient back to the raw
/// columns through `∂ŵ/∂w = (I − ŵŵᵀ)/‖w‖`.
pub fn on_normalized_columns<F>(emb: &StackedEmbeddings, reg: F) -> Result<RegGrad>
where
    F: FnOnce(&StackedEmbeddings) -> Result<RegGrad>,
{
    let mut normalized = emb.clone();
    normalized.w = emb.w.normalized_cols()?;
    let inner = reg(&normalized)?;
    let mut grad = Matrix::zeros(emb.dim(), emb.num_columns());
    for j in 0..emb.num_columns() {
        let n = emb.w.col_norm(j);
        let w_hat = normalized.w.col(j);
        let g = inner.grad.col(j);
        let along = dot(&w_hat, &g);
        let raw: Vec<f64> = g
            .iter()
            .zip(&w_hat)
            .map(|(gi, wi)| (gi - along * wi) / n)
            .collect();
        grad.set_col(j, &raw)?;
    }
    Ok(RegGrad {
        value: inner.value,
        grad,
    })
}
