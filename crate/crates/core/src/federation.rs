//! Federated protocol: local client updates on `(θ, W_k)`, weighted aggregation of the
//! shared backbone, restacking of the private heads, and the server-side correction step
//! on the stacked class embeddings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use crate::data::ClientState;
use crate::data::{PartitionSpec, Sample, SharedIdentity};
use crate::error::{Error, Result};
use crate::linalg::{FeatureVector, Matrix};
use crate::losses::{local_loss_and_grad, LossSpec};
use crate::nn::{Activation, BackboneParams};
use crate::optim::SgdState;
use crate::regularizers::{
    masked_cosine_reg, masked_softmax_reg, on_normalized_columns, RegGrad, SharedGroup, StackedEmbeddings,
};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// FedAvg with private heads.
    FedPe,
    /// FedPe plus the softmax-regularizer correction.
    FedGc,
    /// FedPe plus the cosine-regularizer correction.
    FedCos,
    /// FedPe with heads frozen at initialization.
    FedPeFixed,
    /// Pooled data, one global head.
    Centralized,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::FedPe, Mode::FedGc, Mode::FedCos, Mode::FedPeFixed, Mode::Centralized];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedPe => "fedpe",
            Mode::FedGc => "fedgc",
            Mode::FedCos => "fedcos",
            Mode::FedPeFixed => "fedpe_fixed",
            Mode::Centralized => "centralized",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn corrects(self) -> bool {
        matches!(self, Mode::FedGc | Mode::FedCos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub num_clients: usize,
    /// Fraction of clients sampled per round, in `(0, 1]`.
    pub fraction: f64,
    /// Multiplier on `η` for the correction step, and weight of the regularizer in the
    /// combined objective.
    pub lambda: f64,
    pub eta: f64,
    pub rounds: usize,
    /// Minibatch steps per client per round; `None` means one pass over the local data.
    pub local_steps: Option<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mode: Mode,
    pub loss: LossSpec,
    pub seed: u64,
    /// Apply the correction to the heads of clients that sat out the round as well.
    pub correct_all_heads: bool,
    /// Normalize columns before the regularizer. `None` follows the loss variant for the
    /// softmax regularizer and always normalizes for the cosine one, which is unbounded
    /// below on raw columns.
    pub normalize_embeddings: Option<bool>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 8,
            fraction: 1.0,
            lambda: 20.0,
            eta: 0.1,
            rounds: 200,
            local_steps: None,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 5e-4,
            mode: Mode::FedGc,
            loss: LossSpec::softmax(),
            seed: 0,
            correct_all_heads: true,
            normalize_embeddings: None,
        }
    }
}

impl FederationConfig {
    /// Number of clients sampled per round: `⌈fraction · K⌉`.
    pub fn participants(&self) -> usize {
        let m = libm::ceil(self.fraction * self.num_clients as f64 - 1e-9) as usize;
        m.clamp(1, self.num_clients.max(1))
    }

    pub fn normalize_regularizer(&self) -> bool {
        self.normalize_embeddings
            .unwrap_or(self.mode == Mode::FedCos || self.loss.normalizes())
    }

    /// Library-level checks. `λ = 0` is accepted for the correcting modes so that the
    /// degenerate cases can be run.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_clients == 0 {
            problems.push("num_clients must be >= 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            problems.push(format!("fraction = {} must lie in (0, 1]", self.fraction));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda = {} must be finite and >= 0", self.lambda));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta = {} must be finite and >= 0", self.eta));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay = {} must be finite and >= 0", self.weight_decay));
        }
        if let Err(Error::Config(msg)) = self.loss.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Architecture of the backbone apart from its input width.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            hidden: vec![64],
            embedding_dim: 32,
            activation: Activation::Relu,
        }
    }
}

impl BackboneSpec {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.embedding_dim);
        d
    }
}

/// Seeded initial class embeddings, one column per global class, `N(0, 1/d)` entries.
pub fn init_global_head(embedding_dim: usize, num_classes: usize, seed: u64) -> Result<Matrix> {
    let mut rng = rng_for(seed, stream::HEAD_INIT, 0, 0);
    let normal = Normal::new(0.0, 1.0 / libm::sqrt(embedding_dim as f64))
        .map_err(|_| Error::Config("bad embedding dim".into()))?;
    let data = (0..embedding_dim * num_classes).map(|_| normal.sample(&mut rng)).collect();
    Matrix::from_vec(embedding_dim, num_classes, data)
}

/// Server-side state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: BackboneParams,
    pub embeddings: StackedEmbeddings,
    /// `p_k = n_k / N` over all clients.
    pub weights: Vec<f64>,
    pub round: usize,
    /// Global class id of every stacked column.
    pub column_classes: Vec<usize>,
    /// Identities held by several clients.
    pub shared: Vec<SharedIdentity>,
}

impl ServerState {
    /// Stacks the client heads from a global initial head so that copies of a shared
    /// identity start out equal.
    pub fn new(theta: BackboneParams, global_head: &Matrix, partition: &PartitionSpec) -> Result<Self> {
        if global_head.rows() != theta.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "head rows vs embedding dim",
                expected: theta.output_dim(),
                found: global_head.rows(),
            });
        }
        let mut column_classes = Vec::new();
        let mut client_of = Vec::new();
        for (k, classes) in partition.client_classes.iter().enumerate() {
            for &c in classes {
                if c >= global_head.cols() {
                    return Err(Error::LabelOutOfRange {
                        label: c,
                        classes: global_head.cols(),
                    });
                }
                column_classes.push(c);
                client_of.push(k);
            }
        }
        let w = global_head.select_cols(&column_classes);
        let embeddings = StackedEmbeddings::new(w, client_of, partition.num_clients)?;
        Ok(ServerState {
            theta,
            embeddings,
            weights: partition.weights(),
            round: 0,
            column_classes,
            shared: partition.shared.clone(),
        })
    }

    /// Column of client `k` holding global class `class`.
    pub fn column_of(&self, k: usize, class: usize) -> Option<usize> {
        (0..self.column_classes.len())
            .find(|&j| self.embeddings.client_of()[j] == k && self.column_classes[j] == class)
    }

    /// One group per stacked copy of a shared identity.
    pub fn shared_groups(&self) -> Vec<SharedGroup> {
        let mut groups = Vec::new();
        for s in &self.shared {
            for &k in &s.clients {
                if let Some(column) = self.column_of(k, s.class) {
                    groups.push(SharedGroup {
                        column,
                        clients: s.clients.clone(),
                    });
                }
            }
        }
        groups
    }

    /// What the server sends to client `k`: the backbone and that client's own head only.
    pub fn payload_for(&self, k: usize) -> ClientPayload {
        ClientPayload {
            theta: self.theta.clone(),
            head: self.embeddings.head(k),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.embeddings.w.is_finite()
    }
}

/// Broadcast to one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPayload {
    pub theta: BackboneParams,
    pub head: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub theta: BackboneParams,
    pub head: Matrix,
    pub loss_trace: Vec<f64>,
    pub num_samples: usize,
}

/// Minibatch SGD with momentum on `(θ, W)` against the local loss. Returns the mean
/// minibatch loss of every step.
fn local_sgd<R: Rng + ?Sized>(
    data: &[(FeatureVector, usize)],
    theta: &mut BackboneParams,
    head: &mut Matrix,
    cfg: &FederationConfig,
    update_head: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = data.len();
    let steps = cfg.local_steps.unwrap_or_else(|| n.div_ceil(cfg.batch_size));
    let mut theta_opt = SgdState::new(cfg.eta, cfg.momentum, cfg.weight_decay, theta.num_params())?;
    let mut head_opt = SgdState::new(cfg.eta, cfg.momentum, cfg.weight_decay, head.as_slice().len())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(steps);
    let mut grads = theta.zeros_like();
    let mut head_grad = Matrix::zeros(head.rows(), head.cols());
    for _ in 0..steps {
        if cursor >= n {
            order.shuffle(rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += batch.len();
        let inv = 1.0 / batch.len() as f64;
        grads = grads.zeros_like();
        head_grad.as_mut_slice().fill(0.0);
        let mut loss = 0.0;
        for &i in batch {
            let (x, label) = &data[i];
            let fwd = theta.forward_trace(x)?;
            let lg = local_loss_and_grad(&cfg.loss, head, &fwd.output(), *label)?;
            loss += lg.loss;
            crate::linalg::axpy(inv, lg.grad_embeddings.as_slice(), head_grad.as_mut_slice());
            theta.backward_accumulate(&fwd, &lg.grad_feature, inv, &mut grads)?;
        }
        let loss = loss * inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite("local loss"));
        }
        let mut flat = theta.flatten();
        theta_opt.step(&mut flat, &grads.flatten())?;
        theta.assign_flat(&flat)?;
        if update_head {
            head_opt.step(head.as_mut_slice(), head_grad.as_slice())?;
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Local training of one client for one round. `Ok(None)` signals an empty local dataset.
pub fn client_update(
    client: &ClientState,
    payload: ClientPayload,
    cfg: &FederationConfig,
    round: usize,
) -> Result<Option<ClientUpdate>> {
    if client.local_data.is_empty() {
        return Ok(None);
    }
    if payload.head.cols() != client.num_classes() {
        return Err(Error::ShapeMismatch {
            context: "client head columns vs local classes",
            expected: client.num_classes(),
            found: payload.head.cols(),
        });
    }
    let ClientPayload { mut theta, mut head } = payload;
    let mut rng = rng_for(cfg.seed, stream::CLIENT_BATCHES, round as u64, client.client_id as u64);
    let update_head = cfg.mode != Mode::FedPeFixed;
    let loss_trace = local_sgd(&client.local_data, &mut theta, &mut head, cfg, update_head, &mut rng)?;
    Ok(Some(ClientUpdate {
        client_id: client.client_id,
        theta,
        head,
        loss_trace,
        num_samples: client.num_samples(),
    }))
}

/// `n_k / Σ n` over the given counts.
pub fn normalized_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Sample-count-weighted average of backbones, reduced in the given order.
pub fn aggregate_theta(updates: &[(&BackboneParams, usize)]) -> Result<BackboneParams> {
    let (first, _) = updates.first().ok_or(Error::Empty("backbone updates"))?;
    let counts: Vec<usize> = updates.iter().map(|(_, n)| *n).collect();
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::Empty("backbone updates carry no samples"));
    }
    let weights = normalized_weights(&counts);
    let mut acc = vec![0.0; first.num_params()];
    for ((theta, _), w) in updates.iter().zip(&weights) {
        if theta.dims() != first.dims() {
            return Err(Error::ShapeMismatch {
                context: "aggregated backbone",
                expected: first.num_params(),
                found: theta.num_params(),
            });
        }
        crate::linalg::axpy(*w, &theta.flatten(), &mut acc);
    }
    let mut out = (*first).clone();
    out.assign_flat(&acc)?;
    Ok(out)
}

/// The regularizer chosen by the mode (cosine for FedCos, softmax otherwise).
pub fn regularizer(
    emb: &StackedEmbeddings,
    groups: &[SharedGroup],
    cfg: &FederationConfig,
) -> Result<RegGrad> {
    let reg = |e: &StackedEmbeddings| match cfg.mode {
        Mode::FedCos => masked_cosine_reg(e, groups),
        _ => masked_softmax_reg(e, groups),
    };
    if cfg.normalize_regularizer() {
        on_normalized_columns(emb, reg)
    } else {
        reg(emb)
    }
}

/// `W ← W̃ − λη ∇Reg(W̃)`, a single plain step. `columns` restricts which columns move;
/// `None` updates all of them.
pub fn correction_step(
    emb: &StackedEmbeddings,
    cfg: &FederationConfig,
    groups: &[SharedGroup],
    columns: Option<&[bool]>,
) -> Result<StackedEmbeddings> {
    let mut out = emb.clone();
    if !cfg.mode.corrects() || cfg.lambda == 0.0 {
        return Ok(out);
    }
    let reg = regularizer(emb, groups, cfg)?;
    let step = cfg.lambda * cfg.eta;
    for j in 0..emb.num_columns() {
        if columns.is_some_and(|c| !c[j]) {
            continue;
        }
        out.w.add_to_col(j, -step, &reg.grad.col(j));
    }
    Ok(out)
}

/// Replaces every copy of a shared identity with the mean of its copies.
pub fn merge_shared_identities(server: &ServerState, groups: &[SharedIdentity]) -> Result<ServerState> {
    let mut out = server.clone();
    for g in groups {
        let mut cols = Vec::with_capacity(g.clients.len());
        for &k in &g.clients {
            let col = server.column_of(k, g.class).ok_or_else(|| {
                Error::Config(format!("client {k} holds no column for shared class {}", g.class))
            })?;
            cols.push(col);
        }
        if cols.len() < 2 {
            continue;
        }
        let d = server.embeddings.dim();
        let mut mean = vec![0.0; d];
        for &j in &cols {
            crate::linalg::axpy(1.0, &server.embeddings.w.col(j), &mut mean);
        }
        let inv = 1.0 / cols.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        for &j in &cols {
            out.embeddings.w.set_col(j, &mean)?;
        }
    }
    Ok(out)
}

/// Summary of one protocol round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub participants: Vec<usize>,
    pub skipped: Vec<usize>,
    /// Sample-weighted mean of the participants' per-round mean local loss.
    pub mean_local_loss: f64,
}

/// One round: sample clients, train locally, aggregate `θ`, restack heads, merge shared
/// identities, and apply the correction step.
pub fn run_round<R: Rng + ?Sized>(
    server: &ServerState,
    clients: &[ClientState],
    cfg: &FederationConfig,
    rng: &mut R,
) -> Result<(ServerState, RoundSummary)> {
    let k = clients.len();
    if k != server.embeddings.num_clients() {
        return Err(Error::ShapeMismatch {
            context: "clients vs server",
            expected: server.embeddings.num_clients(),
            found: k,
        });
    }
    let mut sampled: Vec<usize> = rand::seq::index::sample(rng, k, cfg.participants().min(k)).into_vec();
    sampled.sort_unstable();

    let mut updates = Vec::with_capacity(sampled.len());
    let mut skipped = Vec::new();
    for &c in &sampled {
        match client_update(&clients[c], server.payload_for(c), cfg, server.round)? {
            Some(u) => updates.push(u),
            None => skipped.push(c),
        }
    }

    let mut next = server.clone();
    let mut loss_num = 0.0;
    let mut loss_den = 0usize;
    if !updates.is_empty() {
        let pairs: Vec<(&BackboneParams, usize)> = updates.iter().map(|u| (&u.theta, u.num_samples)).collect();
        next.theta = aggregate_theta(&pairs)?;
        for u in &updates {
            if cfg.mode != Mode::FedPeFixed {
                next.embeddings.set_head(u.client_id, &u.head)?;
            }
            let mean = u.loss_trace.iter().sum::<f64>() / u.loss_trace.len().max(1) as f64;
            loss_num += mean * u.num_samples as f64;
            loss_den += u.num_samples;
        }
    }
    if !next.shared.is_empty() && cfg.mode != Mode::FedPeFixed {
        let shared = next.shared.clone();
        next = merge_shared_identities(&next, &shared)?;
    }
    if cfg.mode.corrects() {
        let groups = next.shared_groups();
        let mask: Option<Vec<bool>> = (!cfg.correct_all_heads).then(|| {
            next.embeddings
                .client_of()
                .iter()
                .map(|c| sampled.binary_search(c).is_ok())
                .collect()
        });
        next.embeddings = correction_step(&next.embeddings, cfg, &groups, mask.as_deref())?;
    }
    next.round += 1;
    if !next.is_finite() {
        return Err(Error::NonFinite("server state after round"));
    }
    let summary = RoundSummary {
        round: server.round,
        participants: sampled,
        skipped,
        mean_local_loss: if loss_den > 0 { loss_num / loss_den as f64 } else { 0.0 },
    };
    Ok((next, summary))
}

/// Centralized baseline: `cfg.rounds` passes of minibatch SGD over the pooled data with a
/// single global head. Each pass is a local update of a pooled client with id 0.
pub fn centralized_train(
    all_data: &[Sample],
    theta: BackboneParams,
    head: Matrix,
    cfg: &FederationConfig,
) -> Result<(BackboneParams, Matrix)> {
    let pooled = pooled_client(all_data, head.cols())?;
    let mut theta = theta;
    let mut head = head;
    for round in 0..cfg.rounds {
        let (t, h, _) = centralized_epoch(&pooled, theta, head, cfg, round)?;
        theta = t;
        head = h;
    }
    Ok((theta, head))
}

/// A single client holding every sample under its global label.
pub fn pooled_client(all_data: &[Sample], num_classes: usize) -> Result<ClientState> {
    if let Some(s) = all_data.iter().find(|s| s.label >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes: num_classes,
        });
    }
    Ok(ClientState {
        client_id: 0,
        classes: (0..num_classes).collect(),
        local_data: all_data.iter().map(|s| (s.input.clone(), s.label)).collect(),
    })
}

pub(crate) fn centralized_epoch(
    pooled: &ClientState,
    theta: BackboneParams,
    head: Matrix,
    cfg: &FederationConfig,
    round: usize,
) -> Result<(BackboneParams, Matrix, f64)> {
    let mut central = cfg.clone();
    central.mode = Mode::Centralized;
    match client_update(pooled, ClientPayload { theta, head }, &central, round)? {
        Some(u) => {
            let mean = u.loss_trace.iter().sum::<f64>() / u.loss_trace.len().max(1) as f64;
            Ok((u.theta, u.head, mean))
        }
        None => Err(Error::Empty("pooled dataset")),
    }
}

/// `Σ_k p_k (1/n_k) Σ_i ℓ_k + λ·Reg(W)`, evaluation only.
pub fn combined_objective(server: &ServerState, clients: &[ClientState], cfg: &FederationConfig) -> Result<f64> {
    let mut data_term = 0.0;
    for (k, client) in clients.iter().enumerate() {
        if client.local_data.is_empty() {
            continue;
        }
        let head = server.embeddings.head(k);
        let mut sum = 0.0;
        for (x, label) in &client.local_data {
            let feat = server.theta.forward(x)?;
            sum += local_loss_and_grad(&cfg.loss, &head, &feat, *label)?.loss;
        }
        data_term += server.weights[k] * sum / client.num_samples() as f64;
    }
    if cfg.lambda == 0.0 {
        return Ok(data_term);
    }
    let reg = regularizer(&server.embeddings, &server.shared_groups(), cfg)?;
    Ok(data_term + cfg.lambda * reg.value)
}
