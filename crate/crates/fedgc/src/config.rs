//! Experiment config files: `[section]` headers, `key = value` lines, `#` comments, and
//! comma-separated lists in the `[grid]` section.
//!
//! ```text
//! [federation]
//! clients = 8
//! eta = 0.1
//! [grid]
//! modes = fedpe, fedgc
//! seeds = 0, 1, 2
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedgc_core::data::{PartitionScheme, SyntheticSpec};
use fedgc_core::federation::{BackboneSpec, FederationConfig, Mode};
use fedgc_core::losses::{LossSpec, LossVariant};
use fedgc_core::nn::Activation;
use fedgc_core::simulation::Scenario;

use crate::error::{io_err, ConfigIssue, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub modes: Vec<Mode>,
    pub fractions: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub partitions: Vec<PartitionScheme>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    /// Relative paths resolve against the working directory.
    pub dir: PathBuf,
    pub checkpoints: bool,
    pub histograms: bool,
    /// Test-set embeddings of the final model, for external plotting.
    pub features: bool,
    /// Train/test samples and verification pairs of every seed.
    pub dataset: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            checkpoints: true,
            histograms: true,
            features: false,
            dataset: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Values shared by every grid cell. Its mode, fraction, lambda, seed and partition
    /// scheme are overridden per cell.
    pub base: Scenario,
    pub grid: Grid,
    pub output: OutputSpec,
    /// `section.key` to the 1-based line that set it.
    pub key_lines: BTreeMap<String, usize>,
}

/// Command-line replacements for config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub lambda: Option<f64>,
    pub fraction: Option<f64>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.grid.seeds = vec![seed];
        }
        if let Some(dir) = &o.out {
            self.output.dir = dir.clone();
        }
        if let Some(mode) = o.mode {
            self.grid.modes = vec![mode];
        }
        if let Some(lambda) = o.lambda {
            self.grid.lambdas = vec![lambda];
        }
        if let Some(fraction) = o.fraction {
            self.grid.fractions = vec![fraction];
        }
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.key_lines.get(key).copied()
    }

    fn issue(&self, key: &str, message: impl Into<String>) -> ConfigIssue {
        ConfigIssue {
            line: self.line_of(key),
            key: Some(key.to_owned()),
            message: message.into(),
        }
    }
}

/// Defaults used for keys a config file leaves out.
pub fn default_scenario() -> Scenario {
    Scenario {
        federation: FederationConfig::default(),
        backbone: BackboneSpec::default(),
        data: SyntheticSpec::default(),
        scheme: PartitionScheme::Balanced,
        share_fraction: 0.0,
    }
}

pub fn scheme_name(s: PartitionScheme) -> &'static str {
    match s {
        PartitionScheme::Balanced => "balanced",
        PartitionScheme::LogNormal => "lognormal",
        PartitionScheme::Shared => "shared",
    }
}

fn parse_scheme(s: &str) -> std::result::Result<PartitionScheme, String> {
    match s {
        "balanced" => Ok(PartitionScheme::Balanced),
        "lognormal" => Ok(PartitionScheme::LogNormal),
        "shared" => Ok(PartitionScheme::Shared),
        _ => Err(format!("unknown partition scheme `{s}` (balanced, lognormal, shared)")),
    }
}

pub fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode `{s}` ({})", names.join(", "))
    })
}

fn parse_num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}` as a number"))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(item)
        .collect()
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        _ => Err(format!("unknown activation `{s}` (relu, tanh)")),
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

#[derive(Default)]
struct GridKeys {
    modes: Option<Vec<Mode>>,
    fractions: Option<Vec<f64>>,
    lambdas: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    partitions: Option<Vec<PartitionScheme>>,
}

/// Margin and scale given explicitly; applied after the loss kind so order in the file
/// does not matter.
#[derive(Default)]
struct LossKeys {
    kind: Option<LossVariant>,
    margin: Option<f64>,
    scale: Option<f64>,
}

/// Parses config text. Syntax and type errors are collected and returned together.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut base = default_scenario();
    let mut output = OutputSpec::default();
    let mut grid = GridKeys::default();
    let mut loss = LossKeys::default();
    let mut key_lines = BTreeMap::new();
    let mut issues = Vec::new();
    let mut section: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            match rest.strip_suffix(']').map(str::trim) {
                Some(name) if SECTIONS.contains(&name) => section = Some(name.to_owned()),
                Some(name) => {
                    issues.push(ConfigIssue::at(line_no, None, format!("unknown section [{name}]")));
                    section = None;
                }
                None => issues.push(ConfigIssue::at(line_no, None, "unterminated section header")),
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            issues.push(ConfigIssue::at(line_no, None, format!("expected `key = value`, got `{line}`")));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = &section else {
            issues.push(ConfigIssue::at(line_no, Some(key), "key outside of any section"));
            continue;
        };
        let full = format!("{sec}.{key}");
        if let Some(prev) = key_lines.insert(full.clone(), line_no) {
            issues.push(ConfigIssue::at(line_no, Some(&full), format!("duplicate key, first set on line {prev}")));
            continue;
        }
        let r = set_key(&full, value, &mut base, &mut output, &mut grid, &mut loss);
        if let Err(msg) = r {
            issues.push(ConfigIssue::at(line_no, Some(&full), msg));
        }
    }

    if let Some(kind) = loss.kind {
        base.federation.loss = match kind {
            LossVariant::Softmax => LossSpec::softmax(),
            LossVariant::CosFace => LossSpec::cosface(),
            LossVariant::ArcFace => LossSpec::arcface(),
        };
    }
    if let Some(m) = loss.margin {
        base.federation.loss.margin = m;
    }
    if let Some(s) = loss.scale {
        base.federation.loss.scale = s;
    }

    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let f = &base.federation;
    let grid = Grid {
        modes: grid.modes.unwrap_or_else(|| vec![f.mode]),
        fractions: grid.fractions.unwrap_or_else(|| vec![f.fraction]),
        lambdas: grid.lambdas.unwrap_or_else(|| vec![f.lambda]),
        seeds: grid.seeds.unwrap_or_else(|| vec![f.seed]),
        partitions: grid.partitions.unwrap_or_else(|| vec![base.scheme]),
    };
    Ok(ExperimentConfig {
        base,
        grid,
        output,
        key_lines,
    })
}

const SECTIONS: [&str; 7] = ["federation", "loss", "model", "data", "partition", "grid", "output"];

fn set_key(
    key: &str,
    v: &str,
    base: &mut Scenario,
    out: &mut OutputSpec,
    grid: &mut GridKeys,
    loss: &mut LossKeys,
) -> std::result::Result<(), String> {
    let fed = &mut base.federation;
    let data = &mut base.data;
    match key {
        "federation.clients" => fed.num_clients = parse_num(v)?,
        "federation.fraction" => fed.fraction = parse_num(v)?,
        "federation.lambda" => fed.lambda = parse_num(v)?,
        "federation.eta" => fed.eta = parse_num(v)?,
        "federation.rounds" => fed.rounds = parse_num(v)?,
        "federation.local_steps" => {
            fed.local_steps = if v == "epoch" { None } else { Some(parse_num(v)?) }
        }
        "federation.batch_size" => fed.batch_size = parse_num(v)?,
        "federation.momentum" => fed.momentum = parse_num(v)?,
        "federation.weight_decay" => fed.weight_decay = parse_num(v)?,
        "federation.mode" => fed.mode = parse_mode(v)?,
        "federation.seed" => fed.seed = parse_num(v)?,
        "federation.correct_all_heads" => fed.correct_all_heads = parse_bool(v)?,
        "federation.normalize_embeddings" => {
            fed.normalize_embeddings = if v == "auto" { None } else { Some(parse_bool(v)?) }
        }
        "loss.kind" => {
            loss.kind = Some(match v {
                "softmax" => LossVariant::Softmax,
                "cosface" => LossVariant::CosFace,
                "arcface" => LossVariant::ArcFace,
                _ => return Err(format!("unknown loss `{v}` (softmax, cosface, arcface)")),
            })
        }
        "loss.margin" => loss.margin = Some(parse_num(v)?),
        "loss.scale" => loss.scale = Some(parse_num(v)?),
        "model.hidden" => base.backbone.hidden = parse_list(v, parse_num)?,
        "model.embedding_dim" => base.backbone.embedding_dim = parse_num(v)?,
        "model.activation" => base.backbone.activation = parse_activation(v)?,
        "data.classes" => data.num_classes = parse_num(v)?,
        "data.samples_per_class" => data.samples_per_class = parse_num(v)?,
        "data.test_per_class" => data.test_per_class = parse_num(v)?,
        "data.input_dim" => data.input_dim = parse_num(v)?,
        "data.cluster_std" => data.cluster_std = parse_num(v)?,
        "data.class_center_scale" => data.class_center_scale = parse_num(v)?,
        "data.center_groups" => data.center_groups = parse_num(v)?,
        "data.group_center_scale" => data.group_center_scale = parse_num(v)?,
        "data.pairs_per_class" => data.pairs_per_class = parse_num(v)?,
        "partition.scheme" => base.scheme = parse_scheme(v)?,
        "partition.share_fraction" => base.share_fraction = parse_num(v)?,
        "grid.modes" => grid.modes = Some(parse_list(v, parse_mode)?),
        "grid.fractions" => grid.fractions = Some(parse_list(v, parse_num)?),
        "grid.lambdas" => grid.lambdas = Some(parse_list(v, parse_num)?),
        "grid.seeds" => grid.seeds = Some(parse_list(v, parse_num)?),
        "grid.partitions" => grid.partitions = Some(parse_list(v, parse_scheme)?),
        "output.dir" => out.dir = PathBuf::from(v),
        "output.checkpoints" => out.checkpoints = parse_bool(v)?,
        "output.histograms" => out.histograms = parse_bool(v)?,
        "output.features" => out.features = parse_bool(v)?,
        "output.dataset" => out.dataset = parse_bool(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Every invariant violation in an already parsed config.
pub fn validate(cfg: &ExperimentConfig) -> Vec<ConfigIssue> {
    let mut issues = Vec::new();
    let fed = &cfg.base.federation;
    let data = &cfg.base.data;
    let grid = &cfg.grid;
    let mut check = |ok: bool, key: &str, msg: String| {
        if !ok {
            issues.push(cfg.issue(key, msg));
        }
    };

    check(fed.num_clients >= 1, "federation.clients", format!("must be >= 1, got {}", fed.num_clients));
    check(fed.rounds >= 1, "federation.rounds", format!("must be >= 1, got {}", fed.rounds));
    check(fed.eta > 0.0 && fed.eta.is_finite(), "federation.eta", format!("must be finite and > 0, got {}", fed.eta));
    check(fed.batch_size >= 1, "federation.batch_size", format!("must be >= 1, got {}", fed.batch_size));
    check(
        (0.0..1.0).contains(&fed.momentum),
        "federation.momentum",
        format!("must lie in [0, 1), got {}", fed.momentum),
    );
    check(
        fed.weight_decay >= 0.0 && fed.weight_decay.is_finite(),
        "federation.weight_decay",
        format!("must be finite and >= 0, got {}", fed.weight_decay),
    );
    if let Err(e) = fed.loss.validate() {
        check(false, "loss", e.to_string());
    }
    check(
        cfg.base.backbone.embedding_dim >= 1,
        "model.embedding_dim",
        format!("must be >= 1, got {}", cfg.base.backbone.embedding_dim),
    );
    check(
        cfg.base.backbone.hidden.iter().all(|&h| h >= 1),
        "model.hidden",
        "every hidden width must be >= 1".into(),
    );
    if let Err(fedgc_core::Error::Config(msg)) = data.validate() {
        for m in msg.split("; ") {
            check(false, "data", m.to_owned());
        }
    }

    check(!grid.modes.is_empty(), "grid.modes", "grid has no modes".into());
    check(!grid.fractions.is_empty(), "grid.fractions", "grid has no fractions".into());
    check(!grid.lambdas.is_empty(), "grid.lambdas", "grid has no lambdas".into());
    check(!grid.seeds.is_empty(), "grid.seeds", "grid has no seeds".into());
    check(!grid.partitions.is_empty(), "grid.partitions", "grid has no partitions".into());
    for &c in &grid.fractions {
        check(
            c > 0.0 && c <= 1.0,
            fraction_key(cfg),
            format!("participation fraction {c} must lie in (0, 1]"),
        );
    }
    let corrects = grid.modes.iter().any(|m| m.corrects());
    for &l in &grid.lambdas {
        check(l.is_finite() && l >= 0.0, lambda_key(cfg), format!("lambda {l} must be finite and >= 0"));
        if corrects && l.is_finite() {
            check(l > 0.0, lambda_key(cfg), format!("lambda {l} must be > 0 for fedgc/fedcos"));
        }
    }
    let (k, c) = (fed.num_clients, data.num_classes);
    for &p in &grid.partitions {
        match p {
            PartitionScheme::Balanced => check(
                k >= 1 && c % k == 0,
                partition_key(cfg),
                format!("balanced partition needs clients ({k}) to divide classes ({c})"),
            ),
            PartitionScheme::LogNormal => {
                check(k >= 2, partition_key(cfg), format!("lognormal partition needs >= 2 clients, got {k}"));
                check(c >= k, partition_key(cfg), format!("lognormal partition needs classes ({c}) >= clients ({k})"));
            }
            PartitionScheme::Shared => {
                check(k >= 2, partition_key(cfg), format!("shared partition needs >= 2 clients, got {k}"));
                check(
                    (0.0..1.0).contains(&cfg.base.share_fraction),
                    "partition.share_fraction",
                    format!("must lie in [0, 1), got {}", cfg.base.share_fraction),
                );
            }
        }
    }
    issues
}

fn fraction_key(cfg: &ExperimentConfig) -> &'static str {
    if cfg.key_lines.contains_key("grid.fractions") {
        "grid.fractions"
    } else {
        "federation.fraction"
    }
}

fn lambda_key(cfg: &ExperimentConfig) -> &'static str {
    if cfg.key_lines.contains_key("grid.lambdas") {
        "grid.lambdas"
    } else {
        "federation.lambda"
    }
}

fn partition_key(cfg: &ExperimentConfig) -> &'static str {
    if cfg.key_lines.contains_key("grid.partitions") {
        "grid.partitions"
    } else {
        "partition.scheme"
    }
}

/// Parses and validates, reporting every problem at once.
pub fn check_config(text: &str) -> Result<ExperimentConfig> {
    let cfg = parse_config(text)?;
    let issues = validate(&cfg);
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(issues))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    check_config(&text)
}
