use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedgc::config::{parse_config, parse_mode, validate, ExperimentConfig, Overrides};
use fedgc::runner::{expand_grid, run_experiment};
use fedgc::Error;
use fedgc_core::numcheck::run_suite;

const EXIT_CONFIG: u8 = 1;
const EXIT_ALL_DIVERGED: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "fedgc", version, about = "Federated face-embedding training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of a config's grid.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Check a config and report every problem.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run the gradient verification suite.
    Gradcheck {
        /// Random instances per randomized check.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct OverrideArgs {
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<fedgc_core::federation::Mode>,
    /// Run only this lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Run only this participation fraction.
    #[arg(long)]
    fraction: Option<f64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            out: a.out,
            mode: a.mode,
            lambda: a.lambda,
            fraction: a.fraction,
        }
    }
}

/// Parses, applies overrides, then validates the result.
fn prepare(path: &PathBuf, overrides: OverrideArgs) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    cfg.apply(&overrides.into());
    let issues = validate(&cfg);
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(issues))
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, overrides } => {
            let cfg = match prepare(&config, overrides) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            match run_experiment(&cfg, |line| println!("{line}")) {
                Ok(report) if report.all_diverged() => {
                    eprintln!("every cell diverged");
                    ExitCode::from(EXIT_ALL_DIVERGED)
                }
                Ok(report) => {
                    println!(
                        "{} cells, summary in {}",
                        report.outcomes.len(),
                        cfg.output.dir.join("summary.csv").display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(EXIT_CONFIG)
                }
            }
        }
        Command::Validate { config, overrides } => match prepare(&config, overrides) {
            Ok(cfg) => {
                println!("{}: ok, {} cells", config.display(), expand_grid(&cfg).len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}: {e}", config.display());
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Gradcheck { instances, seed } => {
            let results = match run_suite(instances, seed) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("gradcheck aborted: {e}");
                    return ExitCode::from(EXIT_GRADCHECK);
                }
            };
            println!("{:<32} {:>9} {:>12} {:>9}  result", "check", "instances", "max error", "tol");
            for r in &results {
                println!(
                    "{:<32} {:>9} {:>12.3e} {:>9.0e}  {}",
                    r.name,
                    r.instances,
                    r.max_error,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_GRADCHECK)
            }
        }
    }
}
