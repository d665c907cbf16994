//! Expands a config grid into cells and runs them, writing per-cell outputs.
//!
//! Output layout under `output.dir`:
//!
//! ```text
//! summary.csv
//! cells/<cell>/metrics.jsonl
//! cells/<cell>/cross_client_hist.csv, within_client_hist.csv
//! cells/<cell>/checkpoint/…
//! cells/<cell>/features.txt
//! data/seed_<s>/train.txt, test.txt, pairs.csv
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use fedgc_core::data::PartitionScheme;
use fedgc_core::eval::{embedding_similarity_stats_with, RoundMetrics};
use fedgc_core::federation::Mode;
use fedgc_core::data::Sample;
use fedgc_core::simulation::{Scenario, Simulation};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{scheme_name, ExperimentConfig};
use crate::error::{io_err, Result};
use crate::formats::{save_samples, write_pairs};
use crate::metrics::{metrics_json, write_histogram, write_summary, SummaryRow};

/// Plain decimal unless that gets long, then exponent form (`1e300`).
fn short(x: f64) -> String {
    let plain = x.to_string();
    if plain.len() <= 8 {
        plain
    } else {
        format!("{x:e}")
    }
}

/// One point of the grid with the values that actually affect the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub fraction: f64,
    pub lambda: f64,
    pub partition: PartitionScheme,
    pub seed: u64,
}

impl Cell {
    pub fn partition_label(&self) -> &'static str {
        if self.mode == Mode::Centralized {
            "pooled"
        } else {
            scheme_name(self.partition)
        }
    }

    pub fn name(&self) -> String {
        format!(
            "{}_{}_f{}_l{}_s{}",
            self.mode.name(),
            self.partition_label(),
            short(self.fraction),
            short(self.lambda),
            self.seed
        )
    }

    pub fn scenario(&self, base: &Scenario) -> Scenario {
        let mut s = base.with_seed(self.seed);
        s.federation.mode = self.mode;
        s.federation.fraction = self.fraction;
        s.federation.lambda = self.lambda;
        s.scheme = self.partition;
        s
    }
}

/// Cells in grid order (partition, mode, fraction, lambda, seed). Axes that do not affect
/// a mode collapse: λ is 0 for modes without correction, and the centralized baseline runs
/// once per seed with fraction 1.
pub fn expand_grid(cfg: &ExperimentConfig) -> Vec<Cell> {
    let g = &cfg.grid;
    let mut seen = BTreeSet::new();
    let mut cells = Vec::new();
    for &partition in &g.partitions {
        for &mode in &g.modes {
            for &fraction in &g.fractions {
                for &lambda in &g.lambdas {
                    for &seed in &g.seeds {
                        let central = mode == Mode::Centralized;
                        let cell = Cell {
                            mode,
                            fraction: if central { 1.0 } else { fraction },
                            lambda: if mode.corrects() { lambda } else { 0.0 },
                            partition: if central { g.partitions[0] } else { partition },
                            seed,
                        };
                        if seen.insert(cell.name()) {
                            cells.push(cell);
                        }
                    }
                }
            }
        }
    }
    cells
}

/// A finished (or aborted) run held in memory.
pub struct CellRun {
    pub metrics: Vec<RoundMetrics>,
    /// Round and message of the failure that stopped the run.
    pub failure: Option<(usize, String)>,
    pub sim: Simulation,
}

/// Runs a scenario for its configured rounds, stopping at the first numerical failure.
/// `on_round` sees every completed round.
pub fn simulate_with(scenario: &Scenario, mut on_round: impl FnMut(&RoundMetrics)) -> Result<CellRun> {
    let mut sim = scenario.build()?;
    let mut metrics = Vec::with_capacity(scenario.federation.rounds);
    let mut failure = None;
    for round in 0..scenario.federation.rounds {
        match sim.step() {
            Ok(m) => {
                on_round(&m);
                metrics.push(m);
            }
            Err(e) => {
                failure = Some((round, e.to_string()));
                break;
            }
        }
    }
    Ok(CellRun { metrics, failure, sim })
}

pub fn simulate(scenario: &Scenario) -> Result<CellRun> {
    simulate_with(scenario, |_| {})
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: Cell,
    pub rounds_completed: usize,
    pub last: Option<RoundMetrics>,
    pub failure: Option<(usize, String)>,
}

impl CellOutcome {
    pub fn status(&self) -> String {
        match &self.failure {
            None => "ok".into(),
            Some((round, msg)) => format!("diverged at round {round}: {msg}"),
        }
    }

    fn summary_row(&self) -> SummaryRow {
        let c = &self.cell;
        SummaryRow {
            cell: c.name(),
            mode: c.mode.name().into(),
            fraction: c.fraction,
            lambda: c.lambda,
            partition: c.partition_label().into(),
            seed: c.seed,
            rounds_completed: self.rounds_completed,
            final_accuracy: self.failure.is_none().then(|| self.last.as_ref().map(|m| m.verification_accuracy)).flatten(),
            final_cross_client_max_cos: self
                .failure
                .is_none()
                .then(|| self.last.as_ref().map(|m| m.cross_client_max_cos))
                .flatten(),
            status: self.status(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub outcomes: Vec<CellOutcome>,
}

impl ExperimentReport {
    pub fn all_diverged(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.failure.is_some())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn export_dataset(dir: &Path, sim: &Simulation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let d = sim.dataset();
    let dim = d.input_dim();
    save_samples(&dir.join("train.txt"), dim, &d.train)?;
    save_samples(&dir.join("test.txt"), dim, &d.test)?;
    let p = dir.join("pairs.csv");
    write_pairs(create(&p)?, &d.pairs).map_err(io_err(&p))
}

fn write_cell_artifacts(dir: &Path, cfg: &ExperimentConfig, sim: &Simulation) -> Result<()> {
    let server = sim.server();
    if cfg.output.histograms {
        let stats = embedding_similarity_stats_with(&server.embeddings, Some(&server.column_classes))?;
        for (name, h) in [
            ("cross_client_hist.csv", &stats.cross_client),
            ("within_client_hist.csv", &stats.within_client),
        ] {
            let p = dir.join(name);
            write_histogram(create(&p)?, h).map_err(io_err(&p))?;
        }
    }
    if cfg.output.checkpoints {
        save_checkpoint(&dir.join("checkpoint"), &Checkpoint::from_server(server))?;
    }
    if cfg.output.features {
        let features = sim
            .dataset()
            .test
            .iter()
            .map(|s| {
                Ok(Sample {
                    input: server.theta.forward(&s.input)?,
                    label: s.label,
                })
            })
            .collect::<std::result::Result<Vec<_>, fedgc_core::Error>>()?;
        save_samples(&dir.join("features.txt"), server.theta.output_dim(), &features)?;
    }
    Ok(())
}

/// Runs every cell, writing outputs as it goes. A cell that fails numerically is recorded
/// and the grid continues. `log` receives one line per finished cell.
pub fn run_experiment(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<ExperimentReport> {
    let root = &cfg.output.dir;
    let cells_dir = root.join("cells");
    std::fs::create_dir_all(&cells_dir).map_err(io_err(&cells_dir))?;
    let mut exported = BTreeSet::new();
    let mut outcomes = Vec::new();
    for cell in expand_grid(cfg) {
        let dir = cells_dir.join(cell.name());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mpath = dir.join("metrics.jsonl");
        let mut out = create(&mpath)?;
        let mut write_err = None;
        let run = simulate_with(&cell.scenario(&cfg.base), |m| {
            if write_err.is_none() {
                write_err = writeln!(out, "{}", metrics_json(m)).err();
            }
        })?;
        if let Some(e) = write_err {
            return Err(io_err(&mpath)(e));
        }
        out.flush().map_err(io_err(&mpath))?;
        if run.failure.is_none() {
            write_cell_artifacts(&dir, cfg, &run.sim)?;
        }
        if cfg.output.dataset && exported.insert(cell.seed) {
            export_dataset(&root.join("data").join(format!("seed_{}", cell.seed)), &run.sim)?;
        }
        let outcome = CellOutcome {
            rounds_completed: run.metrics.len(),
            last: run.metrics.last().cloned(),
            failure: run.failure,
            cell,
        };
        let acc = outcome
            .last
            .as_ref()
            .map_or("-".into(), |m| format!("{:.4}", m.verification_accuracy));
        log(&format!("{:<48} acc {acc:>6}  {}", outcome.cell.name(), outcome.status()));
        outcomes.push(outcome);
    }
    let rows: Vec<SummaryRow> = outcomes.iter().map(CellOutcome::summary_row).collect();
    let spath = root.join("summary.csv");
    write_summary(create(&spath)?, &rows).map_err(io_err(&spath))?;
    Ok(ExperimentReport { outcomes })
}
