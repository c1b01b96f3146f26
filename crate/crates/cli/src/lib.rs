//! `cqsim`: run mean-estimation experiments and the distributed tasks built
//! on them from the command line.
//!
//! Every flag has a config-file key of the same name (without the leading
//! dashes). A value given on the command line wins over the config file,
//! which wins over the built-in default.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use corrquant::harness::{
    bounds_check, run_dme, sweep, write_bound_checks, write_reports, DmeConfig, SweepAxis, SweepConfig, SyntheticSpec,
    TrialReport,
};
use corrquant::randomness::{derive_seed, Stream};
use corrquant::tasks::{
    distributed_kmeans, distributed_sgd, federated_averaging, gaussian_clusters, logistic_fixture, write_runs,
    LabeledRun, LearningRate, Objective, OptimizerConfig, PowerProblem, ShardedDataset, TaskConfig, TaskResult,
};
use corrquant::vector_quant::VectorBatch;
use corrquant::{MasterSeed, SchemeId};
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_N: usize = 100;
pub const DEFAULT_D: usize = 1024;
pub const DEFAULT_K: usize = 2;
pub const DEFAULT_TRIALS: usize = 10;

/// Exit status when a checked bound does not hold.
pub const EXIT_BOUND_FAILED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cqsim", version, about = "Correlated quantization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean-estimation error of each scheme on one dataset
    Dme(DmeArgs),
    /// Mean-estimation error along a grid of sigma_md, k or n
    Sweep(SweepArgs),
    /// Measured error against the closed-form upper and lower bounds
    BoundsCheck(BoundsArgs),
    /// Distributed Lloyd's k-means
    Kmeans(KmeansArgs),
    /// Distributed power iteration for the top eigenvector
    Power(PowerArgs),
    /// Federated averaging of a softmax classifier
    Fedavg(FedavgArgs),
    /// Projected distributed gradient descent
    Sgd(SgdArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Comma-separated scheme names
    #[arg(long)]
    pub scheme: Option<String>,
    /// Number of clients [default: 100]
    #[arg(long)]
    pub n: Option<usize>,
    /// Quantization levels per coordinate [default: 2]
    #[arg(long)]
    pub k: Option<usize>,
    /// Independent repetitions [default: 10]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write results as CSV to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat TOML file with defaults for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct DmeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dimension of synthetic data [default: 1024]
    #[arg(long)]
    pub d: Option<usize>,
    /// CSV of client vectors, one row per client; replaces the generator
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// uniform-mean or sparse-mean [default: uniform-mean]
    #[arg(long)]
    pub generator: Option<String>,
    /// Mean deviation of synthetic data [default: 0.1]
    #[arg(long = "sigma-md")]
    pub sigma_md: Option<f64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dimension [default: 1024]
    #[arg(long)]
    pub d: Option<usize>,
    /// sigma_md, k or n [default: sigma_md]
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated axis values [default: depends on the axis]
    #[arg(long)]
    pub grid: Option<String>,
    /// uniform-mean or sparse-mean [default: uniform-mean]
    #[arg(long)]
    pub generator: Option<String>,
    /// Mean deviation when the axis is not sigma_md [default: 0.1]
    #[arg(long = "sigma-md")]
    pub sigma_md: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Monte Carlo repetitions per instance [default: 10000]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write results as CSV to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat TOML file with defaults for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dimension of synthetic data
    #[arg(long)]
    pub d: Option<usize>,
    /// Client data as CSV; replaces the synthetic fixture
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Rounds of communication
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Synthetic points per client
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct KmeansArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Number of centers [default: 10]
    #[arg(long)]
    pub centers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct FedavgArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Held-out labeled CSV for accuracy; defaults to the training data
    #[arg(long = "test-dataset")]
    pub test_dataset: Option<PathBuf>,
    /// Clients sampled each round [default: 10]
    #[arg(long = "clients-per-round")]
    pub clients_per_round: Option<usize>,
    /// Local passes over each shard [default: 1]
    #[arg(long = "local-epochs")]
    pub local_epochs: Option<usize>,
    /// Local minibatch size [default: 10]
    #[arg(long = "local-batch")]
    pub local_batch: Option<usize>,
    /// Local learning rate [default: 0.5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Model deltas are clipped to this norm [default: 1]
    #[arg(long = "clip-radius")]
    pub clip_radius: Option<f64>,
    /// Model weights are projected onto this ball [default: 100]
    #[arg(long = "projection-radius")]
    pub projection_radius: Option<f64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SgdArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// logistic or quadratic [default: logistic]
    #[arg(long)]
    pub objective: Option<String>,
    /// Ridge penalty of the logistic objective [default: 0.001]
    #[arg(long)]
    pub l2: Option<f64>,
    /// Step size is 1 / (H + 1/eta) [default: 10]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Gradients are clipped to this norm [default: 1]
    #[arg(long = "clip-radius")]
    pub clip_radius: Option<f64>,
    /// Iterates are projected onto this ball [default: 10]
    #[arg(long = "projection-radius")]
    pub projection_radius: Option<f64>,
    /// Norm of the true weights in the synthetic fixture [default: 3]
    #[arg(long)]
    pub signal: Option<f64>,
}

/// Settings before defaults; also the schema of the config file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    pub scheme: Option<String>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub generator: Option<String>,
    pub sigma_md: Option<f64>,
    pub axis: Option<String>,
    pub grid: Option<String>,
    pub rounds: Option<usize>,
    pub points: Option<usize>,
    pub centers: Option<usize>,
    pub clients_per_round: Option<usize>,
    pub local_epochs: Option<usize>,
    pub local_batch: Option<usize>,
    pub lr: Option<f64>,
    pub eta: Option<f64>,
    pub clip_radius: Option<f64>,
    pub projection_radius: Option<f64>,
    pub objective: Option<String>,
    pub l2: Option<f64>,
    pub signal: Option<f64>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        Settings { $($field: $top.$field.or($base.$field),)* }
    };
}

impl Settings {
    /// Values set in `self` win over `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(
            base,
            self,
            scheme,
            n,
            d,
            k,
            trials,
            seed,
            out,
            dataset,
            test_dataset,
            generator,
            sigma_md,
            axis,
            grid,
            rounds,
            points,
            centers,
            clients_per_round,
            local_epochs,
            local_batch,
            lr,
            eta,
            clip_radius,
            projection_radius,
            objective,
            l2,
            signal
        )
    }

    pub fn from_toml(text: &str) -> Result<Settings, toml::de::Error> {
        toml::from_str(text)
    }
}

impl CommonArgs {
    fn settings(&self) -> Settings {
        Settings {
            scheme: self.scheme.clone(),
            n: self.n,
            k: self.k,
            trials: self.trials,
            seed: self.seed,
            out: self.out.clone(),
            ..Settings::default()
        }
    }
}

impl TaskArgs {
    fn settings(&self) -> Settings {
        Settings {
            d: self.d,
            dataset: self.dataset.clone(),
            rounds: self.rounds,
            points: self.points,
            ..self.common.settings()
        }
    }
}

impl Command {
    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Dme(a) => a.common.config.as_deref(),
            Command::Sweep(a) => a.common.config.as_deref(),
            Command::BoundsCheck(a) => a.config.as_deref(),
            Command::Kmeans(a) => a.task.common.config.as_deref(),
            Command::Power(a) => a.task.common.config.as_deref(),
            Command::Fedavg(a) => a.task.common.config.as_deref(),
            Command::Sgd(a) => a.task.common.config.as_deref(),
        }
    }

    /// Values given on the command line.
    pub fn flags(&self) -> Settings {
        match self {
            Command::Dme(a) => Settings {
                d: a.d,
                dataset: a.dataset.clone(),
                generator: a.generator.clone(),
                sigma_md: a.sigma_md,
                ..a.common.settings()
            },
            Command::Sweep(a) => Settings {
                d: a.d,
                axis: a.axis.clone(),
                grid: a.grid.clone(),
                generator: a.generator.clone(),
                sigma_md: a.sigma_md,
                ..a.common.settings()
            },
            Command::BoundsCheck(a) => Settings {
                trials: a.trials,
                seed: a.seed,
                out: a.out.clone(),
                ..Settings::default()
            },
            Command::Kmeans(a) => Settings {
                centers: a.centers,
                ..a.task.settings()
            },
            Command::Power(a) => a.task.settings(),
            Command::Fedavg(a) => Settings {
                test_dataset: a.test_dataset.clone(),
                clients_per_round: a.clients_per_round,
                local_epochs: a.local_epochs,
                local_batch: a.local_batch,
                lr: a.lr,
                clip_radius: a.clip_radius,
                projection_radius: a.projection_radius,
                ..a.task.settings()
            },
            Command::Sgd(a) => Settings {
                objective: a.objective.clone(),
                l2: a.l2,
                eta: a.eta,
                clip_radius: a.clip_radius,
                projection_radius: a.projection_radius,
                signal: a.signal,
                ..a.task.settings()
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n{}", .0.iter().map(|p| format!("  {p}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
    #[error("config file {path}: {message}")]
    Config { path: String, message: String },
    #[error("dataset {path}: {source}")]
    Dataset { path: String, source: corrquant::Error },
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
    #[error(transparent)]
    Run(#[from] corrquant::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Dataset { .. } | CliError::Run(corrquant::Error::Dataset { .. }) => 2,
            CliError::Run(corrquant::Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    UniformMean,
    SparseMean,
}

impl Generator {
    fn spec(self, n: usize, d: usize, sigma_md: f64) -> SyntheticSpec {
        match self {
            Generator::UniformMean => SyntheticSpec::uniform_mean(n, d, sigma_md),
            Generator::SparseMean => SyntheticSpec::sparse_mean(n, d, sigma_md),
        }
    }
}

/// Where task data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { points: usize, d: usize },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmePlan {
    pub schemes: Vec<SchemeId>,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: MasterSeed,
    pub generator: Generator,
    pub sigma_md: f64,
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    /// `None` is exact averaging.
    pub schemes: Vec<Option<SchemeId>>,
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub rounds: usize,
    pub seed: MasterSeed,
    pub source: DataSource,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Kmeans {
        centers: usize,
    },
    Power,
    Fedavg {
        test_dataset: Option<PathBuf>,
        clients_per_round: usize,
        local_epochs: usize,
        local_batch: usize,
        lr: f64,
        clip_radius: f64,
        projection_radius: f64,
    },
    Sgd {
        objective: Objective,
        eta: f64,
        clip_radius: f64,
        projection_radius: f64,
        signal: f64,
    },
}

/// A fully validated run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Dme(DmePlan),
    Sweep {
        plan: DmePlan,
        axis: SweepAxis,
        grid: Vec<f64>,
    },
    BoundsCheck {
        trials: usize,
        seed: MasterSeed,
    },
    Task {
        kind: TaskKind,
        plan: TaskPlan,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
}

/// Collects every problem before reporting.
#[derive(Default)]
struct Checker {
    problems: Vec<String>,
}

impl Checker {
    fn fail(&mut self, flag: &str, message: impl Into<String>) {
        self.problems.push(format!("--{flag}: {}", message.into()));
    }

    fn at_least(&mut self, flag: &str, value: usize, min: usize) -> usize {
        if value < min {
            self.fail(flag, format!("must be at least {min}, got {value}"));
        }
        value
    }

    fn positive(&mut self, flag: &str, value: f64) -> f64 {
        if !(value > 0.0 && value.is_finite()) {
            self.fail(flag, format!("must be positive and finite, got {value}"));
        }
        value
    }

    fn non_negative(&mut self, flag: &str, value: f64) -> f64 {
        if !(value >= 0.0 && value.is_finite()) {
            self.fail(flag, format!("must be non-negative and finite, got {value}"));
        }
        value
    }

    fn finish<T>(self, value: T) -> Result<T, CliError> {
        if self.problems.is_empty() {
            Ok(value)
        } else {
            Err(CliError::Invalid(self.problems))
        }
    }
}

fn parse_schemes(c: &mut Checker, text: &str, allow_none: bool) -> Vec<Option<SchemeId>> {
    let mut out = Vec::new();
    for name in text.split(',').map(str::trim) {
        if name == "none" && allow_none {
            out.push(None);
        } else {
            match name.parse::<SchemeId>() {
                Ok(s) => out.push(Some(s)),
                Err(_) => {
                    let extra = if allow_none { ", none" } else { "" };
                    let known: Vec<&str> = SchemeId::ALL.iter().map(|s| s.name()).collect();
                    c.fail(
                        "scheme",
                        format!("unknown scheme '{name}' (expected one of {}{extra})", known.join(", ")),
                    );
                }
            }
        }
    }
    out
}

fn check_k_for(c: &mut Checker, schemes: &[Option<SchemeId>], k: usize) {
    if k != 2 && schemes.contains(&Some(SchemeId::Correlated1Bit)) {
        c.fail("k", format!("correlated-1bit needs k = 2, got {k}"));
    }
}

fn default_dme_schemes(k: usize, sweeps_k: bool) -> Vec<SchemeId> {
    SchemeId::ALL
        .iter()
        .copied()
        .filter(|&s| s != SchemeId::Correlated1Bit || (k == 2 && !sweeps_k))
        .collect()
}

fn parse_generator(c: &mut Checker, text: Option<&str>) -> Generator {
    match text.unwrap_or("uniform-mean") {
        "uniform-mean" => Generator::UniformMean,
        "sparse-mean" => Generator::SparseMean,
        other => {
            c.fail(
                "generator",
                format!("unknown generator '{other}' (expected uniform-mean or sparse-mean)"),
            );
            Generator::UniformMean
        }
    }
}

fn default_grid(axis: SweepAxis) -> Vec<f64> {
    match axis {
        SweepAxis::SigmaMd => vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
        SweepAxis::K => vec![2.0, 4.0, 8.0, 16.0, 32.0],
        SweepAxis::N => vec![10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0],
    }
}

fn parse_grid(c: &mut Checker, text: &str, axis: SweepAxis) -> Vec<f64> {
    let mut grid = Vec::new();
    for item in text.split(',').map(str::trim) {
        match item.parse::<f64>() {
            Ok(v) => {
                let ok = match axis {
                    SweepAxis::SigmaMd => v.is_finite() && v >= 0.0,
                    SweepAxis::K => v.fract() == 0.0 && v >= 2.0,
                    SweepAxis::N => v.fract() == 0.0 && v >= 1.0,
                };
                if ok {
                    grid.push(v);
                } else {
                    c.fail("grid", format!("value {item} is not valid for axis {axis}"));
                }
            }
            Err(_) => c.fail("grid", format!("cannot parse '{item}' as a number")),
        }
    }
    grid
}

fn dme_plan(c: &mut Checker, s: &Settings, sweeps_k: bool) -> DmePlan {
    let k = c.at_least("k", s.k.unwrap_or(DEFAULT_K), 2);
    let schemes = match &s.scheme {
        Some(text) => parse_schemes(c, text, false).into_iter().flatten().collect(),
        None => default_dme_schemes(k, sweeps_k),
    };
    if !sweeps_k {
        check_k_for(c, &schemes.iter().copied().map(Some).collect::<Vec<_>>(), k);
    } else if schemes.contains(&SchemeId::Correlated1Bit) {
        c.fail("scheme", "correlated-1bit cannot be swept over k");
    }
    DmePlan {
        schemes,
        n: c.at_least("n", s.n.unwrap_or(DEFAULT_N), 1),
        d: c.at_least("d", s.d.unwrap_or(DEFAULT_D), 1),
        k,
        trials: c.at_least("trials", s.trials.unwrap_or(DEFAULT_TRIALS), 1),
        seed: MasterSeed(s.seed.unwrap_or(0)),
        generator: parse_generator(c, s.generator.as_deref()),
        sigma_md: c.non_negative("sigma-md", s.sigma_md.unwrap_or(0.1)),
        dataset: s.dataset.clone(),
    }
}

fn task_plan(
    c: &mut Checker,
    s: &Settings,
    default_d: usize,
    default_rounds: usize,
    default_points: usize,
) -> TaskPlan {
    let k = c.at_least("k", s.k.unwrap_or(DEFAULT_K), 2);
    let schemes = parse_schemes(
        c,
        s.scheme.as_deref().unwrap_or("none,correlated-klevel,independent"),
        true,
    );
    check_k_for(c, &schemes, k);
    let source = match &s.dataset {
        Some(path) => DataSource::File(path.clone()),
        None => DataSource::Synthetic {
            points: c.at_least("points", s.points.unwrap_or(default_points), 1),
            d: c.at_least("d", s.d.unwrap_or(default_d), 1),
        },
    };
    TaskPlan {
        schemes,
        n: c.at_least("n", s.n.unwrap_or(DEFAULT_N), 1),
        k,
        trials: c.at_least("trials", s.trials.unwrap_or(DEFAULT_TRIALS), 1),
        rounds: c.at_least("rounds", s.rounds.unwrap_or(default_rounds), 1),
        seed: MasterSeed(s.seed.unwrap_or(0)),
        source,
    }
}

/// Applies defaults to merged settings and checks every constraint.
pub fn validate(command: &Command, s: &Settings) -> Result<RunConfig, CliError> {
    let mut c = Checker::default();
    let config = match command {
        Command::Dme(_) => RunConfig::Dme(dme_plan(&mut c, s, false)),
        Command::Sweep(_) => {
            let axis = match s.axis.as_deref().unwrap_or("sigma_md").parse::<SweepAxis>() {
                Ok(a) => a,
                Err(e) => {
                    c.fail("axis", e.to_string());
                    SweepAxis::SigmaMd
                }
            };
            let plan = dme_plan(&mut c, s, axis == SweepAxis::K);
            let grid = match &s.grid {
                Some(text) => parse_grid(&mut c, text, axis),
                None => default_grid(axis),
            };
            if grid.is_empty() {
                c.fail("grid", "needs at least one value");
            }
            RunConfig::Sweep { plan, axis, grid }
        }
        Command::BoundsCheck(_) => RunConfig::BoundsCheck {
            trials: c.at_least("trials", s.trials.unwrap_or(10_000), 1),
            seed: MasterSeed(s.seed.unwrap_or(0)),
        },
        Command::Kmeans(_) => {
            let plan = task_plan(&mut c, s, 784, 20, 20);
            let kind = TaskKind::Kmeans {
                centers: c.at_least("centers", s.centers.unwrap_or(10), 1),
            };
            RunConfig::Task { kind, plan }
        }
        Command::Power(_) => RunConfig::Task {
            plan: task_plan(&mut c, s, 784, 20, 20),
            kind: TaskKind::Power,
        },
        Command::Fedavg(_) => {
            let plan = task_plan(&mut c, s, 784, 20, 20);
            let clients_per_round = c.at_least("clients-per-round", s.clients_per_round.unwrap_or(10), 1);
            if clients_per_round > plan.n && matches!(plan.source, DataSource::Synthetic { .. }) {
                c.fail(
                    "clients-per-round",
                    format!("must not exceed --n ({}), got {clients_per_round}", plan.n),
                );
            }
            let kind = TaskKind::Fedavg {
                test_dataset: s.test_dataset.clone(),
                clients_per_round,
                local_epochs: c.at_least("local-epochs", s.local_epochs.unwrap_or(1), 1),
                local_batch: c.at_least("local-batch", s.local_batch.unwrap_or(10), 1),
                lr: c.positive("lr", s.lr.unwrap_or(0.5)),
                clip_radius: c.positive("clip-radius", s.clip_radius.unwrap_or(1.0)),
                projection_radius: c.positive("projection-radius", s.projection_radius.unwrap_or(100.0)),
            };
            RunConfig::Task { kind, plan }
        }
        Command::Sgd(_) => {
            let plan = task_plan(&mut c, s, 10, 100, 200);
            let l2 = c.non_negative("l2", s.l2.unwrap_or(1e-3));
            let objective = match s.objective.as_deref().unwrap_or("logistic") {
                "logistic" => Objective::Logistic { l2 },
                "quadratic" => Objective::Quadratic,
                other => {
                    c.fail(
                        "objective",
                        format!("unknown objective '{other}' (expected logistic or quadratic)"),
                    );
                    Objective::Quadratic
                }
            };
            let kind = TaskKind::Sgd {
                objective,
                eta: c.positive("eta", s.eta.unwrap_or(10.0)),
                clip_radius: c.positive("clip-radius", s.clip_radius.unwrap_or(1.0)),
                projection_radius: c.positive("projection-radius", s.projection_radius.unwrap_or(10.0)),
                signal: c.non_negative("signal", s.signal.unwrap_or(3.0)),
            };
            RunConfig::Task { kind, plan }
        }
    };
    c.finish(config)
}

fn load_config(path: &Path) -> Result<Settings, CliError> {
    let err = |message: String| CliError::Config {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    Settings::from_toml(&text).map_err(|e| err(e.to_string()))
}

/// Merges flags over the config file and validates the result.
pub fn resolve(command: &Command) -> Result<Invocation, CliError> {
    let file = match command.config_path() {
        Some(path) => load_config(path)?,
        None => Settings::default(),
    };
    let merged = command.flags().over(file);
    let config = validate(command, &merged)?;
    Ok(Invocation {
        config,
        out: merged.out,
    })
}

fn load_dataset(path: &Path, clients: usize) -> Result<ShardedDataset, CliError> {
    let wrap = |source| CliError::Dataset {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(|e| wrap(corrquant::Error::Io(e.to_string())))?;
    ShardedDataset::from_csv(BufReader::new(file), clients).map_err(wrap)
}

fn write_csv(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> corrquant::Result<()>) -> Result<(), CliError> {
    let err = |message: String| CliError::Output {
        path: path.display().to_string(),
        message,
    };
    let file = File::create(path).map_err(|e| err(e.to_string()))?;
    let mut w = BufWriter::new(file);
    write(&mut w).map_err(|e| err(e.to_string()))?;
    w.flush().map_err(|e| err(e.to_string()))
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn report_table(reports: &[TrialReport], axis: Option<SweepAxis>) -> String {
    let mut t = String::new();
    let lead = axis.map(|a| format!("{:<10}", a.to_string())).unwrap_or_default();
    let _ = writeln!(
        t,
        "{lead}{:<22} {:>12} {:>24} {:>11}",
        "scheme", "bits/client", "mse (stderr)", "rmse"
    );
    for r in reports {
        let lead = match axis {
            Some(SweepAxis::SigmaMd) => format!("{:<10}", r.sigma_md),
            Some(SweepAxis::K) => format!("{:<10}", r.k),
            Some(SweepAxis::N) => format!("{:<10}", r.n),
            None => String::new(),
        };
        let cell = format!("{} ({})", sci(r.mse), sci(r.stderr));
        let _ = writeln!(
            t,
            "{lead}{:<22} {:>12.1} {:>24} {:>11}",
            r.scheme.name(),
            r.bits_per_client,
            cell,
            sci(r.rmse)
        );
    }
    t
}

fn dme_batch(plan: &DmePlan) -> Result<VectorBatch, CliError> {
    match &plan.dataset {
        Some(path) => {
            let data = load_dataset(path, 1)?;
            let d = data.dim();
            let flat: Vec<f64> = data.points().flatten().copied().collect();
            let rows = flat.len() / d;
            let lower = flat.iter().copied().fold(f64::INFINITY, f64::min);
            let upper = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut batch = VectorBatch::with_tight_radius(flat, rows, d)?;
            if lower < upper {
                batch = batch.with_coordinate_bounds(lower, upper)?;
            }
            Ok(batch)
        }
        None => Ok(plan.generator.spec(plan.n, plan.d, plan.sigma_md).generate(plan.seed)?),
    }
}

fn run_dme_plan(plan: &DmePlan) -> Result<Vec<TrialReport>, CliError> {
    let batch = dme_batch(plan)?;
    let mut reports = Vec::with_capacity(plan.schemes.len());
    for &scheme in &plan.schemes {
        let cfg = DmeConfig {
            scheme,
            k: plan.k,
            trials: plan.trials,
            seed: plan.seed,
        };
        let mut out = run_dme(&batch, &cfg)?;
        if plan.dataset.is_none() {
            out.report.sigma_md = plan.sigma_md;
        }
        reports.push(out.report);
    }
    Ok(reports)
}

fn scheme_label(scheme: Option<SchemeId>) -> String {
    scheme.map_or_else(|| "none".to_string(), |s| s.name().to_string())
}

fn task_data(plan: &TaskPlan, kind: &TaskKind) -> Result<(ShardedDataset, Option<ShardedDataset>), CliError> {
    match (&plan.source, kind) {
        (DataSource::File(path), TaskKind::Fedavg { test_dataset, .. }) => {
            let train = load_dataset(path, plan.n)?;
            let test = test_dataset.as_deref().map(|p| load_dataset(p, 1)).transpose()?;
            Ok((train, test))
        }
        (DataSource::File(path), _) => Ok((load_dataset(path, plan.n)?, None)),
        (&DataSource::Synthetic { points, d }, TaskKind::Sgd { signal, .. }) => {
            Ok((logistic_fixture(plan.n, points, d, *signal, plan.seed)?, None))
        }
        (&DataSource::Synthetic { points, d }, TaskKind::Fedavg { .. }) => {
            // Held-out clients drawn from the same clusters.
            let held_out = 1000usize.div_ceil(points);
            let all = gaussian_clusters(plan.n + held_out, points, d, 10, 0.08, plan.seed)?;
            let (train, test) = all.split_clients(plan.n)?;
            Ok((train, Some(test)))
        }
        (&DataSource::Synthetic { points, d }, _) => {
            Ok((gaussian_clusters(plan.n, points, d, 10, 0.08, plan.seed)?, None))
        }
    }
}

fn run_tasks(kind: &TaskKind, plan: &TaskPlan) -> Result<Vec<LabeledRun>, CliError> {
    let (data, test) = task_data(plan, kind)?;
    let power = match kind {
        TaskKind::Power => Some(PowerProblem::new(&data)?),
        _ => None,
    };
    let mut runs = Vec::with_capacity(plan.schemes.len() * plan.trials);
    for &scheme in &plan.schemes {
        for trial in 0..plan.trials {
            let seed = MasterSeed(derive_seed(plan.seed, Stream::Trial, trial as u64));
            let task = TaskConfig {
                rounds: plan.rounds,
                scheme,
                k: plan.k,
                seed,
            };
            let result: TaskResult = match kind {
                TaskKind::Kmeans { centers } => distributed_kmeans(&data, *centers, &task)?.0,
                TaskKind::Power => power.as_ref().map(|p| p.run(&task)).transpose()?.unwrap_or_default(),
                TaskKind::Fedavg {
                    clients_per_round,
                    local_epochs,
                    local_batch,
                    lr,
                    clip_radius,
                    projection_radius,
                    ..
                } => {
                    let cfg = OptimizerConfig {
                        rounds: plan.rounds,
                        learning_rate: LearningRate::Constant(*lr),
                        projection_radius: *projection_radius,
                        clip_radius: *clip_radius,
                        scheme,
                        k: plan.k,
                        local_epochs: *local_epochs,
                        local_batch: *local_batch,
                        seed,
                    };
                    federated_averaging(&data, test.as_ref().unwrap_or(&data), &cfg, *clients_per_round)?.0
                }
                TaskKind::Sgd {
                    objective,
                    eta,
                    clip_radius,
                    projection_radius,
                    ..
                } => {
                    let cfg = OptimizerConfig {
                        rounds: plan.rounds,
                        learning_rate: LearningRate::Smooth {
                            smoothness: None,
                            eta: *eta,
                        },
                        projection_radius: *projection_radius,
                        clip_radius: *clip_radius,
                        scheme,
                        k: plan.k,
                        local_epochs: 1,
                        local_batch: 1,
                        seed,
                    };
                    distributed_sgd(&data, *objective, &cfg)?
                }
            };
            runs.push(LabeledRun {
                scheme: scheme_label(scheme),
                trial,
                result,
            });
        }
    }
    Ok(runs)
}

fn metric_name(kind: &TaskKind) -> &'static str {
    match kind {
        TaskKind::Kmeans { .. } => "objective",
        TaskKind::Power => "1 - cos^2",
        TaskKind::Fedavg { .. } => "accuracy",
        TaskKind::Sgd { .. } => "suboptimality",
    }
}

fn task_table(kind: &TaskKind, plan: &TaskPlan, runs: &[LabeledRun]) -> String {
    let mut t = String::new();
    let header = format!("final {} mean (std)", metric_name(kind));
    let _ = writeln!(t, "{:<22} {:>30} {:>12}", "scheme", header, "bits/client");
    for &scheme in &plan.schemes {
        let label = scheme_label(scheme);
        let mine: Vec<&LabeledRun> = runs.iter().filter(|r| r.scheme == label).collect();
        let finals: Vec<f64> = mine.iter().map(|r| r.result.final_metric()).collect();
        let bits: Vec<f64> = mine
            .iter()
            .flat_map(|r| r.result.bits_per_client.iter().copied())
            .collect();
        let (mean, std) = mean_std(&finals);
        let cell = format!("{} ({})", sci(mean), sci(std));
        let _ = writeln!(t, "{label:<22} {cell:>30} {:>12.1}", mean_std(&bits).0);
    }
    t
}

/// Runs a validated invocation, printing the summary to `stdout`.
/// Returns the process exit status.
pub fn execute(inv: &Invocation, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let print = |stdout: &mut dyn Write, text: &str| {
        stdout.write_all(text.as_bytes()).map_err(|e| CliError::Output {
            path: "stdout".into(),
            message: e.to_string(),
        })
    };
    match &inv.config {
        RunConfig::Dme(plan) => {
            let reports = run_dme_plan(plan)?;
            if let Some(path) = &inv.out {
                write_csv(path, |w| write_reports(w, &reports))?;
            }
            print(stdout, &report_table(&reports, None))?;
        }
        RunConfig::Sweep { plan, axis, grid } => {
            let base = match &plan.dataset {
                Some(_) => {
                    return Err(CliError::Invalid(vec![
                        "--dataset: sweep uses synthetic data only".into()
                    ]))
                }
                None => plan.generator.spec(plan.n, plan.d, plan.sigma_md),
            };
            let reports = sweep(&SweepConfig {
                axis: *axis,
                grid: grid.clone(),
                base,
                k: plan.k,
                schemes: plan.schemes.clone(),
                trials: plan.trials,
                seed: plan.seed,
            })?;
            if let Some(path) = &inv.out {
                write_csv(path, |w| write_reports(w, &reports))?;
            }
            print(stdout, &report_table(&reports, Some(*axis)))?;
        }
        RunConfig::BoundsCheck { trials, seed } => {
            let checks = bounds_check(*trials, *seed)?;
            if let Some(path) = &inv.out {
                write_csv(path, |w| write_bound_checks(w, &checks))?;
            }
            let mut t = String::new();
            for c in &checks {
                let verdict = if c.passed() { "PASS" } else { "FAIL" };
                let _ = writeln!(
                    t,
                    "{verdict} {}: measured {} bound {}",
                    c.name,
                    sci(c.measured),
                    sci(c.bound)
                );
            }
            print(stdout, &t)?;
            if checks.iter().any(|c| !c.passed()) {
                return Ok(EXIT_BOUND_FAILED);
            }
        }
        RunConfig::Task { kind, plan } => {
            let runs = run_tasks(kind, plan)?;
            if let Some(path) = &inv.out {
                write_csv(path, |w| write_runs(w, &runs))?;
            }
            print(stdout, &task_table(kind, plan, &runs))?;
        }
    }
    Ok(0)
}

/// Parses `args`, runs, and reports errors on stderr. Returns the exit status.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match resolve(&cli.command).and_then(|inv| execute(&inv, stdout)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
