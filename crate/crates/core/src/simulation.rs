//! Round-by-round driver wiring data, partition, protocol and metrics together.

use alloc::vec::Vec;

use crate::data::{
    generate, partition_balanced, partition_lognormal, partition_shared, ClientState, Partition, PartitionScheme,
    SyntheticDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{embedding_similarity_stats_with, mean_anchor_feature_dist, model_verification_accuracy, RoundMetrics};
use crate::federation::{
    centralized_epoch, combined_objective, init_global_head, pooled_client, run_round, BackboneSpec,
    FederationConfig, Mode, ServerState,
};
use crate::linalg::Matrix;
use crate::losses::local_loss_and_grad;
use crate::nn::BackboneParams;
use crate::rng::{rng_for, stream};

/// Everything needed to build a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub federation: FederationConfig,
    pub backbone: BackboneSpec,
    pub data: SyntheticSpec,
    pub scheme: PartitionScheme,
    pub share_fraction: f64,
}

impl Scenario {
    /// Copy with every seed (data, partition, initialization, sampling) set from `seed`.
    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut s = self.clone();
        s.federation.seed = seed;
        s.data.seed = seed;
        s
    }

    pub fn partition(&self, dataset: &SyntheticDataset) -> Result<Partition> {
        let k = self.federation.num_clients;
        match self.scheme {
            PartitionScheme::Balanced => partition_balanced(dataset, k),
            PartitionScheme::LogNormal => partition_lognormal(dataset, k, self.data.seed),
            PartitionScheme::Shared => partition_shared(dataset, k, self.share_fraction, self.data.seed),
        }
    }

    pub fn build(&self) -> Result<Simulation> {
        let dataset = generate(&self.data)?;
        let partition = self.partition(&dataset)?;
        Simulation::new(self.federation.clone(), &self.backbone, dataset, partition)
    }
}

pub struct Simulation {
    cfg: FederationConfig,
    dataset: SyntheticDataset,
    partition: Partition,
    server: ServerState,
    central: Option<(ClientState, Matrix)>,
}

impl Simulation {
    pub fn new(
        cfg: FederationConfig,
        backbone: &BackboneSpec,
        dataset: SyntheticDataset,
        partition: Partition,
    ) -> Result<Self> {
        cfg.validate()?;
        if partition.clients.len() != cfg.num_clients {
            return Err(Error::ShapeMismatch {
                context: "partition clients vs config",
                expected: cfg.num_clients,
                found: partition.clients.len(),
            });
        }
        let mut rng = rng_for(cfg.seed, stream::BACKBONE_INIT, 0, 0);
        let theta = BackboneParams::init(&backbone.dims(dataset.input_dim()), backbone.activation, &mut rng)?;
        let head = init_global_head(backbone.embedding_dim, dataset.num_classes, cfg.seed)?;
        let server = ServerState::new(theta, &head, &partition.spec)?;
        let central = if cfg.mode == Mode::Centralized {
            Some((pooled_client(&dataset.train, dataset.num_classes)?, head))
        } else {
            None
        };
        Ok(Simulation {
            cfg,
            dataset,
            partition,
            server,
            central,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.dataset
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.partition.clients
    }

    /// Global head of the centralized baseline.
    pub fn global_head(&self) -> Option<&Matrix> {
        self.central.as_ref().map(|(_, h)| h)
    }

    /// Runs one round and reports metrics on the resulting state.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let round = self.server.round;
        let (mean_loss, objective) = match self.central.take() {
            Some((pooled, head)) => {
                let (theta, head, loss) =
                    centralized_epoch(&pooled, self.server.theta.clone(), head, &self.cfg, round)?;
                self.server.theta = theta;
                for (j, &class) in self.server.column_classes.iter().enumerate() {
                    self.server.embeddings.w.set_col(j, &head.col(class))?;
                }
                self.server.round += 1;
                if !self.server.is_finite() {
                    return Err(Error::NonFinite("centralized parameters"));
                }
                let objective = pooled_objective(&self.server.theta, &head, &pooled, &self.cfg)?;
                self.central = Some((pooled, head));
                (loss, objective)
            }
            None => {
                let mut rng = rng_for(self.cfg.seed, stream::CLIENT_SAMPLING, round as u64, 0);
                let (next, summary) = run_round(&self.server, &self.partition.clients, &self.cfg, &mut rng)?;
                self.server = next;
                let objective = combined_objective(&self.server, &self.partition.clients, &self.cfg)?;
                (summary.mean_local_loss, objective)
            }
        };
        let stats = embedding_similarity_stats_with(&self.server.embeddings, Some(&self.server.column_classes))?;
        let metrics = RoundMetrics {
            round,
            mean_local_loss: mean_loss,
            combined_objective: objective,
            verification_accuracy: model_verification_accuracy(
                &self.server.theta,
                &self.dataset.test,
                &self.dataset.pairs,
            )?,
            cross_client_max_cos: stats.cross_client_max_cos.unwrap_or(-1.0),
            within_client_max_cos: stats.within_client_max_cos.unwrap_or(-1.0),
            mean_anchor_feature_dist: mean_anchor_feature_dist(&self.server, &self.partition.clients)?,
        };
        if !metrics.is_finite() {
            return Err(Error::NonFinite("round metrics"));
        }
        Ok(metrics)
    }

    /// Runs the configured number of rounds.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        (0..self.cfg.rounds).map(|_| self.step()).collect()
    }
}

fn pooled_objective(theta: &BackboneParams, head: &Matrix, pooled: &ClientState, cfg: &FederationConfig) -> Result<f64> {
    let mut sum = 0.0;
    for (x, label) in &pooled.local_data {
        let feat = theta.forward(x)?;
        sum += local_loss_and_grad(&cfg.loss, head, &feat, *label)?.loss;
    }
    Ok(sum / pooled.local_data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(mode: Mode) -> Scenario {
        Scenario {
            federation: FederationConfig {
                num_clients: 4,
                rounds: 3,
                eta: 0.05,
                lambda: 1.0,
                batch_size: 8,
                mode,
                seed: 3,
                ..FederationConfig::default()
            },
            backbone: BackboneSpec {
                hidden: alloc::vec![8],
                embedding_dim: 6,
                ..BackboneSpec::default()
            },
            data: SyntheticSpec {
                num_classes: 8,
                samples_per_class: 6,
                test_per_class: 3,
                input_dim: 5,
                ..SyntheticSpec::default()
            },
            scheme: PartitionScheme::Balanced,
            share_fraction: 0.0,
        }
    }

    #[test]
    fn every_mode_runs_and_is_reproducible() {
        for mode in Mode::ALL {
            let s = scenario(mode);
            let a = s.build().unwrap().run().unwrap();
            let b = s.build().unwrap().run().unwrap();
            assert_eq!(a, b, "{mode:?}");
            assert_eq!(a.len(), 3);
            assert!(a.iter().all(|m| (0.0..=1.0).contains(&m.verification_accuracy)));
        }
    }

    #[test]
    fn shared_scheme_runs() {
        let mut s = scenario(Mode::FedGc);
        s.scheme = PartitionScheme::Shared;
        s.share_fraction = 0.25;
        let mut sim = s.build().unwrap();
        sim.run().unwrap();
        assert_eq!(sim.partition().spec.shared.len(), 2);
    }

    #[test]
    fn divergence_surfaces_as_error() {
        let mut s = scenario(Mode::FedGc);
        s.federation.eta = 1e6;
        s.federation.rounds = 20;
        let err = s.build().unwrap().run().unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
    }
}
