//! Flags, the optional TOML config file and the resolved run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use livenet_core::expert::DatasetConfig;
use livenet_core::sim::ScenarioKind;
use serde::{Deserialize, Serialize};

/// Seed used by every command when none is given.
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_RUNS: usize = 50;
/// Start-position jitter (m) for repeated runs of a nominal scenario.
pub const DEFAULT_JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Livenet,
    /// Obstacle rows only.
    LivenetNoLiveness,
    MpcCbf,
    MpcCbfLive,
}

impl ControllerKind {
    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Self::Livenet | Self::LivenetNoLiveness)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Livenet => "livenet",
            Self::LivenetNoLiveness => "livenet-no-liveness",
            Self::MpcCbf => "mpc-cbf",
            Self::MpcCbfLive => "mpc-cbf-live",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioSelector {
    Doorway,
    Intersection,
    All,
}

impl ScenarioSelector {
    pub fn kinds(self) -> Vec<ScenarioKind> {
        match self {
            Self::Doorway => vec![ScenarioKind::Doorway],
            Self::Intersection => vec![ScenarioKind::Intersection],
            Self::All => vec![ScenarioKind::Doorway, ScenarioKind::Intersection],
        }
    }
}

impl FromStr for ScenarioSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Tune the MPC expert and record demonstrations.
    GenData,
    /// Fit the network to a dataset.
    Train,
    /// Repeated nominal runs and, with --suite, the robustness suite.
    Eval,
    /// One episode with trajectory CSV and SVG plots.
    Run,
}

#[derive(Debug, Parser)]
#[command(
    name = "livenet",
    version,
    about = "Safe and live two-robot navigation: data, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true, value_enum)]
    pub scenario: Option<ScenarioSelector>,
    #[arg(long, global = true, value_enum)]
    pub controller: Option<ControllerKind>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    #[arg(long, global = true)]
    pub suite: bool,
    /// TOML file; its values override the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub episodes_per_kind: Option<usize>,
    pub nominal_per_kind: Option<usize>,
    pub tuning_runs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub jitter: Option<f64>,
}

/// Limits checked by `eval`; any violation exits with the threshold code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub max_collisions: Option<usize>,
    pub max_deadlocks: Option<usize>,
    pub min_suite_solved: Option<usize>,
}

impl Thresholds {
    pub fn is_empty(&self) -> bool {
        self.max_collisions.is_none() && self.max_deadlocks.is_none() && self.min_suite_solved.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<ScenarioSelector>,
    pub controller: Option<ControllerKind>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub runs: Option<usize>,
    pub suite: Option<bool>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub scenario: ScenarioSelector,
    pub controller: ControllerKind,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub runs: usize,
    pub suite: bool,
    pub data: DataSection,
    pub train: TrainSection,
    pub jitter: f64,
    pub thresholds: Thresholds,
}

impl RunConfig {
    /// Defaults for `command`, as if no flags were given.
    pub fn new(command: Command) -> Self {
        let out = match command {
            Command::GenData => "out/data",
            Command::Train => "out/model",
            Command::Eval => "out/eval",
            Command::Run => "out/run",
        };
        Self {
            command,
            scenario: match command {
                Command::Run => ScenarioSelector::Doorway,
                _ => ScenarioSelector::All,
            },
            controller: ControllerKind::Livenet,
            checkpoint: None,
            dataset: None,
            seed: DEFAULT_SEED,
            out: PathBuf::from(out),
            runs: DEFAULT_RUNS,
            suite: false,
            data: DataSection::default(),
            train: TrainSection::default(),
            jitter: DEFAULT_JITTER,
            thresholds: Thresholds::default(),
        }
    }

    /// Flags first, then the config file on top.
    pub fn resolve(cli: Cli) -> Result<Self, String> {
        let mut c = Self::new(cli.command);
        if let Some(v) = cli.scenario {
            c.scenario = v;
        }
        if let Some(v) = cli.controller {
            c.controller = v;
        }
        c.checkpoint = cli.checkpoint.or(c.checkpoint);
        c.dataset = cli.dataset.or(c.dataset);
        c.seed = cli.seed.unwrap_or(c.seed);
        c.out = cli.out.unwrap_or(c.out);
        c.runs = cli.runs.unwrap_or(c.runs);
        c.suite |= cli.suite;
        if let Some(path) = &cli.config {
            c.apply(FileConfig::load(path)?);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, f: FileConfig) {
        if let Some(v) = f.scenario {
            self.scenario = v;
        }
        if let Some(v) = f.controller {
            self.controller = v;
        }
        if f.checkpoint.is_some() {
            self.checkpoint = f.checkpoint;
        }
        if f.dataset.is_some() {
            self.dataset = f.dataset;
        }
        self.seed = f.seed.unwrap_or(self.seed);
        self.out = f.out.unwrap_or(self.out.clone());
        self.runs = f.runs.unwrap_or(self.runs);
        self.suite = f.suite.unwrap_or(self.suite);
        self.data = f.data;
        self.train = f.train;
        self.jitter = f.eval.jitter.unwrap_or(self.jitter);
        self.thresholds = f.thresholds;
    }

    /// Read paths must exist; `run` needs a single scenario.
    pub fn validate(&self) -> Result<(), String> {
        let needs_ckpt = matches!(self.command, Command::Eval | Command::Run) && self.controller.needs_checkpoint();
        if needs_ckpt {
            match &self.checkpoint {
                None => return Err(format!("--checkpoint is required for controller {}", self.controller)),
                Some(p) if !p.is_file() => return Err(format!("checkpoint {} does not exist", p.display())),
                _ => {}
            }
        }
        if self.command == Command::Train {
            match &self.dataset {
                None => return Err("--dataset is required for train".into()),
                Some(p) if !p.is_dir() => return Err(format!("dataset {} does not exist", p.display())),
                _ => {}
            }
        }
        if self.command == Command::Run && self.scenario == ScenarioSelector::All {
            return Err("run needs a single --scenario (doorway or intersection)".into());
        }
        if self.command == Command::Eval && self.runs == 0 && !self.suite {
            return Err("nothing to evaluate: --runs 0 without --suite".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(format!("invalid jitter {}", self.jitter));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = DatasetConfig::default();
        DatasetConfig {
            seed: self.seed,
            episodes_per_kind: self.data.episodes_per_kind.unwrap_or(d.episodes_per_kind),
            nominal_per_kind: self.data.nominal_per_kind.unwrap_or(d.nominal_per_kind),
            tuning_runs: self.data.tuning_runs.unwrap_or(d.tuning_runs),
        }
    }
}
