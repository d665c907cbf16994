//! Verification accuracy, class-embedding geometry, and gradient diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClientState, Sample, VerificationPair};
use crate::error::{Error, Result};
use crate::federation::ServerState;
use crate::linalg::{cosine, dot, norm, FeatureVector};
use crate::losses::global_softmax_grad;
use crate::nn::BackboneParams;
use crate::regularizers::{masked_softmax_reg, StackedEmbeddings};

pub const HISTOGRAM_BINS: usize = 50;

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_local_loss: f64,
    pub combined_objective: f64,
    pub verification_accuracy: f64,
    /// `-1` when there is no cross-client pair.
    pub cross_client_max_cos: f64,
    /// `-1` when no client holds two classes.
    pub within_client_max_cos: f64,
    /// Mean of `‖W_{k,y_i} − G(x_i)‖` over the training samples.
    pub mean_anchor_feature_dist: f64,
}

impl RoundMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.mean_local_loss,
            self.combined_objective,
            self.verification_accuracy,
            self.cross_client_max_cos,
            self.within_client_max_cos,
            self.mean_anchor_feature_dist,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Best accuracy over all thresholds placed at midpoints between consecutive distinct
/// scores (plus both extremes). A pair is predicted "same" when its score exceeds the
/// threshold.
pub fn verification_accuracy(scored: &[(f64, bool)]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Empty("verification pairs"));
    }
    if !scored.iter().any(|p| p.1) || scored.iter().all(|p| p.1) {
        return Err(Error::Degenerate("verification pairs need both labels"));
    }
    if scored.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::NonFinite("verification scores"));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    // Threshold below everything: every pair predicted "same".
    let positives = sorted.iter().filter(|p| p.1).count();
    let mut correct = positives;
    let mut best = correct;
    let mut i = 0;
    while i < n {
        let score = sorted[i].0;
        // Move the whole tie group below the threshold.
        while i < n && sorted[i].0 == score {
            if sorted[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        best = best.max(correct);
    }
    Ok(best as f64 / n as f64)
}

/// Cosine similarity of the backbone embeddings of every pair. Zero embeddings score 0.
pub fn score_pairs(theta: &BackboneParams, test: &[Sample], pairs: &[VerificationPair]) -> Result<Vec<(f64, bool)>> {
    let feats: Vec<FeatureVector> = test
        .iter()
        .map(|s| theta.forward(&s.input))
        .collect::<Result<_>>()?;
    pairs
        .iter()
        .map(|p| {
            let a = feats.get(p.a).ok_or(Error::LabelOutOfRange {
                label: p.a,
                classes: feats.len(),
            })?;
            let b = feats.get(p.b).ok_or(Error::LabelOutOfRange {
                label: p.b,
                classes: feats.len(),
            })?;
            Ok((cosine(a, b).unwrap_or(0.0), p.same))
        })
        .collect()
}

pub fn model_verification_accuracy(
    theta: &BackboneParams,
    test: &[Sample],
    pairs: &[VerificationPair],
) -> Result<f64> {
    verification_accuracy(&score_pairs(theta, test, pairs)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Histogram {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn bin_left(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / self.counts.len() as f64
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let t = (v - self.lo) / (self.hi - self.lo) * bins as f64;
        let i = (libm::floor(t).max(0.0) as usize).min(bins - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStats {
    pub cross_client_max_cos: Option<f64>,
    pub within_client_max_cos: Option<f64>,
    pub cross_client: Histogram,
    pub within_client: Histogram,
    /// Zero-norm columns left out of every pair.
    pub excluded_columns: usize,
}

/// Pairwise cosine of the class embeddings split into within-client and cross-client pairs.
pub fn embedding_similarity_stats(emb: &StackedEmbeddings) -> Result<SimilarityStats> {
    embedding_similarity_stats_with(emb, None)
}

/// As [`embedding_similarity_stats`], skipping pairs of columns that carry the same
/// identity (copies of a shared class) when `identities` is given.
pub fn embedding_similarity_stats_with(
    emb: &StackedEmbeddings,
    identities: Option<&[usize]>,
) -> Result<SimilarityStats> {
    if emb.num_columns() < 2 {
        return Err(Error::Empty("need at least two embedding columns"));
    }
    let cols: Vec<Vec<f64>> = (0..emb.num_columns()).map(|j| emb.w.col(j)).collect();
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut stats = SimilarityStats {
        cross_client_max_cos: None,
        within_client_max_cos: None,
        cross_client: Histogram::new(-1.0, 1.0, HISTOGRAM_BINS),
        within_client: Histogram::new(-1.0, 1.0, HISTOGRAM_BINS),
        excluded_columns: norms.iter().filter(|&&n| n == 0.0).count(),
    };
    let owners = emb.client_of();
    for a in 0..cols.len() {
        if norms[a] == 0.0 {
            continue;
        }
        for b in a + 1..cols.len() {
            if norms[b] == 0.0 || identities.is_some_and(|ids| ids[a] == ids[b]) {
                continue;
            }
            let c = (dot(&cols[a], &cols[b]) / (norms[a] * norms[b])).clamp(-1.0, 1.0);
            let (max, hist) = if owners[a] == owners[b] {
                (&mut stats.within_client_max_cos, &mut stats.within_client)
            } else {
                (&mut stats.cross_client_max_cos, &mut stats.cross_client)
            };
            *max = Some(max.map_or(c, |m: f64| m.max(c)));
            hist.add(c);
        }
    }
    Ok(stats)
}

/// Mean distance between each training feature and its own class embedding.
pub fn mean_anchor_feature_dist(server: &ServerState, clients: &[ClientState]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, client) in clients.iter().enumerate() {
        let head = server.embeddings.head(k);
        for (x, label) in &client.local_data {
            let feat = server.theta.forward(x)?;
            let w = head.col(*label);
            let d: f64 = w.iter().zip(feat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            total += libm::sqrt(d);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Three views of the gradient that reaches one cross-client column `W_{z,j}` from a probe
/// sample `X` of class `W_{k,y}`, with the anchor column replaced by `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionReport {
    pub negative_column: usize,
    /// Regularizer gradient (anchor occurrences frozen).
    pub regularizer_grad: Vec<f64>,
    /// Feature form: `e^{W_{z,j}ᵀX} X / (e^{W_{k,y}ᵀX} + Σ_{cross} e^{W_{z',j'}ᵀX})`.
    pub feature_form: Vec<f64>,
    /// Centralized softmax gradient over every column.
    pub centralized: Vec<f64>,
    pub max_abs_diff_reg_vs_feature: f64,
    pub cos_reg_vs_centralized: f64,
    pub cos_feature_vs_centralized: f64,
    /// `‖feature_form‖ / ‖centralized‖`.
    pub magnitude_ratio: f64,
}

pub fn correction_direction(
    emb: &StackedEmbeddings,
    anchor: usize,
    feature: &[f64],
    negative: usize,
) -> Result<DirectionReport> {
    let owners = emb.client_of();
    if anchor >= emb.num_columns() || negative >= emb.num_columns() {
        return Err(Error::LabelOutOfRange {
            label: anchor.max(negative),
            classes: emb.num_columns(),
        });
    }
    if owners[anchor] == owners[negative] {
        return Err(Error::Config("probe negative must belong to another client".into()));
    }
    let mut probe = emb.clone();
    probe.w.set_col(anchor, feature)?;
    let mut mask = vec![false; probe.num_columns()];
    mask[anchor] = true;
    let reg = masked_softmax_reg(&probe.clone().with_anchor_mask(mask)?, &[])?;
    let regularizer_grad = reg.grad.col(negative);

    let logit = |j: usize| probe.w.col_dot(j, feature);
    let cross: Vec<usize> = (0..probe.num_columns())
        .filter(|&j| owners[j] != owners[anchor])
        .collect();
    let anchor_logit = logit(anchor);
    let cross_logits: Vec<f64> = cross.iter().map(|&j| logit(j)).collect();
    let m = cross_logits.iter().copied().fold(anchor_logit, f64::max);
    let denom = libm::exp(anchor_logit - m) + cross_logits.iter().map(|&t| libm::exp(t - m)).sum::<f64>();
    let coef = libm::exp(logit(negative) - m) / denom;
    let feature_form: Vec<f64> = feature.iter().map(|x| coef * x).collect();

    let centralized = global_softmax_grad(&probe.w, feature, anchor)?.grad_embeddings.col(negative);

    let max_abs_diff = regularizer_grad
        .iter()
        .zip(&feature_form)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let nc = norm(&centralized);
    Ok(DirectionReport {
        negative_column: negative,
        cos_reg_vs_centralized: cosine(&regularizer_grad, &centralized).unwrap_or(0.0),
        cos_feature_vs_centralized: cosine(&feature_form, &centralized).unwrap_or(0.0),
        magnitude_ratio: if nc == 0.0 { f64::NAN } else { norm(&feature_form) / nc },
        max_abs_diff_reg_vs_feature: max_abs_diff,
        regularizer_grad,
        feature_form,
        centralized,
    })
}

/// Aggregate of [`correction_direction`] over every cross-client column for one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSummary {
    pub probe_client: usize,
    pub anchor_column: usize,
    pub reports: Vec<DirectionReport>,
    pub min_cos_reg_vs_centralized: f64,
    pub max_abs_diff_reg_vs_feature: f64,
    pub min_magnitude_ratio: f64,
    pub max_magnitude_ratio: f64,
}

/// Probes the first sample of `probe_client` under the current server state.
pub fn grad_direction_diagnostic(
    server: &ServerState,
    clients: &[ClientState],
    probe_client: usize,
) -> Result<DirectionSummary> {
    let client = clients.get(probe_client).ok_or(Error::Empty("probe client"))?;
    let (x, label) = client.local_data.first().ok_or(Error::Empty("probe client data"))?;
    let feature = server.theta.forward(x)?;
    let anchor = server
        .embeddings
        .client_columns(probe_client)
        .get(*label)
        .copied()
        .ok_or(Error::LabelOutOfRange {
            label: *label,
            classes: client.num_classes(),
        })?;
    let owners = server.embeddings.client_of();
    let reports = (0..server.embeddings.num_columns())
        .filter(|&j| owners[j] != probe_client)
        .map(|j| correction_direction(&server.embeddings, anchor, &feature, j))
        .collect::<Result<Vec<_>>>()?;
    let fold = |f: fn(&DirectionReport) -> f64, init: f64, op: fn(f64, f64) -> f64| {
        reports.iter().map(f).fold(init, op)
    };
    Ok(DirectionSummary {
        probe_client,
        anchor_column: anchor,
        min_cos_reg_vs_centralized: fold(|r| r.cos_reg_vs_centralized, f64::INFINITY, f64::min),
        max_abs_diff_reg_vs_feature: fold(|r| r.max_abs_diff_reg_vs_feature, 0.0, f64::max),
        min_magnitude_ratio: fold(|r| r.magnitude_ratio, f64::INFINITY, f64::min),
        max_magnitude_ratio: fold(|r| r.magnitude_ratio, 0.0, f64::max),
        reports,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central differences per coordinate against `analytic`. Relative error is
/// `|a − b| / max(1, |a| + |b|)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64, tol: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    if x.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            context: "analytic gradient",
            expected: x.len(),
            found: analytic.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (fd - a).abs() / (fd.abs() + a.abs()).max(1.0);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(FdReport {
        max_rel_error: worst,
        worst_index,
        tolerance: tol,
        passed: worst < tol,
    })
}
