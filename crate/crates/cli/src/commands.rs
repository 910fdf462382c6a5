//! The four subcommands. Each writes its artifacts plus a `SHA256SUMS` file
//! covering the deterministic ones.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use livenet_core::expert::{generate_dataset, read_dataset, write_dataset, ExpertDataset, MpcConfig, MpcController};
use livenet_core::policy::{
    train, Checkpoint, ControllerConfig, LiveNetController, NetworkParams, TrainConfig, TrainError,
};
use livenet_core::sim::{
    build_scenario, compute_metrics, desired_paths, jittered, perturbation_suite, run_episode, summarize, Controller,
    Metrics, ScenarioKind, ScenarioSpec, Summary, TrajectoryLog, SUITE_SIZE,
};
use livenet_core::world::Vec2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ControllerKind, RunConfig};
use crate::{plots, CliError};

pub const CHECKSUM_FILE: &str = "SHA256SUMS";
pub const CHECKPOINT_FILE: &str = "model.lvnt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUNS_FILE: &str = "runs.csv";
pub const SUITE_FILE: &str = "suite.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const LOG_FILE: &str = "log.json";
pub const TRAJECTORY_SVG: &str = "trajectories.svg";
pub const VELOCITY_SVG: &str = "velocity.svg";
pub const BARRIER_SVG: &str = "barrier.svg";

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(dir.join(name), bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// `sha256  name` lines for `names` (sorted), written to `dir/SHA256SUMS`.
pub fn write_checksums(dir: &Path, names: &[&str]) -> Result<String, CliError> {
    let mut names = names.to_vec();
    names.sort_unstable();
    let mut out = String::new();
    for n in names {
        let bytes = fs::read(dir.join(n)).map_err(|e| CliError::Runtime(format!("cannot read {n}: {e}")))?;
        out.push_str(&format!("{}  {n}\n", hex::encode(Sha256::digest(&bytes))));
    }
    write_file(dir, CHECKSUM_FILE, out.as_bytes())?;
    Ok(out)
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<ExpertDataset, CliError> {
    let ctl = ControllerConfig::default();
    let ds = generate_dataset(&config.dataset_config(), &ctl).map_err(CliError::runtime)?;
    let m = &ds.manifest;

    println!("expert tuning ({} candidates tried):", m.tuning.len());
    println!(
        "{:>6} {:>6} {:>7} {:>5} {:>5} {:>5} {:>9}",
        "q", "r", "gamma_l", "coll", "dead", "unfin", "status"
    );
    for t in &m.tuning {
        let status = if t.accepted() { "accepted" } else { "rejected" };
        println!(
            "{:>6} {:>6} {:>7} {:>5} {:>5} {:>5} {:>9}",
            t.q_position, t.r, t.gamma_liveness, t.collisions, t.deadlocks, t.unfinished, status
        );
    }
    println!();
    println!(
        "{:>4} {:<14} {:>5} {:>5} {:>5} {:>7} {:>7}",
        "ep", "scenario", "coll", "dead", "goal", "status", "samples"
    );
    for e in &m.episodes {
        println!(
            "{:>4} {:<14} {:>5} {:>5} {:>5} {:>7} {:>7}",
            e.index,
            e.scenario.name,
            e.collision as u8,
            e.deadlock as u8,
            e.reached as u8,
            if e.kept { "kept" } else { "skipped" },
            e.samples
        );
    }
    let skipped = m.episodes.iter().filter(|e| !e.kept).count();
    println!(
        "episodes: {} kept, {skipped} skipped; samples: {}",
        m.episodes.len() - skipped,
        ds.samples.len()
    );

    if ds.samples.is_empty() {
        return Err(CliError::Runtime(
            "dataset is empty: every expert episode was skipped".into(),
        ));
    }
    write_dataset(&ds, &config.out).map_err(CliError::runtime)?;
    write_checksums(
        &config.out,
        &[
            livenet_core::expert::dataset::SAMPLES_FILE,
            livenet_core::expert::dataset::MANIFEST_FILE,
        ],
    )?;
    println!("wrote {}", config.out.display());
    Ok(ds)
}

pub fn train_config(config: &RunConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: config.train.epochs.unwrap_or(d.epochs),
        batch_size: config.train.batch_size.unwrap_or(d.batch_size),
        learning_rate: config.train.learning_rate.unwrap_or(d.learning_rate),
        seed: config.seed,
        ..d
    }
}

/// Returns the per-epoch mean losses.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<f64>, CliError> {
    let dir = config
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    let tc = train_config(config);
    let ds = read_dataset(dir, &tc.controller).map_err(CliError::runtime)?;
    println!(
        "training on {} samples for {} epochs (seed {})",
        ds.samples.len(),
        tc.epochs,
        tc.seed
    );
    let limits = livenet_core::KinodynamicLimits::default();
    let outcome = train(&ds.samples, &tc, &limits).map_err(|e| match e {
        TrainError::NonFinite { .. } => CliError::Runtime(format!("training diverged: {e}")),
        e => CliError::runtime(e),
    })?;

    create_dir(&config.out)?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        loss.push_str(&format!("{i},{l}\n"));
    }
    write_file(&config.out, LOSS_FILE, loss.as_bytes())?;
    let ckpt = Checkpoint {
        params: outcome.params,
        encoding: tc.controller.encoding,
    };
    ckpt.save(&config.out.join(CHECKPOINT_FILE))
        .map_err(CliError::runtime)?;
    write_checksums(&config.out, &[CHECKPOINT_FILE, LOSS_FILE])?;
    if let (Some(first), Some(last)) = (outcome.epoch_losses.first(), outcome.epoch_losses.last()) {
        println!("loss {first:.4e} -> {last:.4e}");
    }
    println!("wrote {}", config.out.display());
    Ok(outcome.epoch_losses)
}

/// Builds fresh controllers of one kind.
#[derive(Clone)]
pub struct ControllerFactory {
    kind: ControllerKind,
    params: Option<Arc<NetworkParams>>,
    policy: ControllerConfig,
}

impl ControllerFactory {
    pub fn new(kind: ControllerKind, checkpoint: Option<&Path>) -> Result<Self, CliError> {
        let mut policy = ControllerConfig::default();
        let params = if kind.needs_checkpoint() {
            let path = checkpoint.ok_or_else(|| CliError::Usage(format!("--checkpoint is required for {kind}")))?;
            let ckpt = Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            policy.encoding = ckpt.encoding;
            policy.liveness = kind == ControllerKind::Livenet;
            Some(Arc::new(ckpt.params))
        } else {
            None
        };
        Ok(Self { kind, params, policy })
    }

    pub fn from_params(params: Arc<NetworkParams>, policy: ControllerConfig) -> Self {
        let kind = if policy.liveness {
            ControllerKind::Livenet
        } else {
            ControllerKind::LivenetNoLiveness
        };
        Self {
            kind,
            params: Some(params),
            policy,
        }
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn make(&self) -> Box<dyn Controller> {
        match (self.kind, &self.params) {
            (ControllerKind::MpcCbf, _) => Box::new(MpcController::new(MpcConfig {
                liveness: false,
                ..MpcConfig::default()
            })),
            (ControllerKind::MpcCbfLive, _) => Box::new(MpcController::new(MpcConfig::default())),
            (_, Some(p)) => Box::new(LiveNetController::new(p.clone(), self.policy)),
            (_, None) => unreachable!("network controllers are built with parameters"),
        }
    }

    pub fn episode(&self, spec: &ScenarioSpec) -> Result<TrajectoryLog, CliError> {
        let mut cs: Vec<Box<dyn Controller>> = spec.agents.iter().map(|_| self.make()).collect();
        run_episode(spec, &mut cs).map_err(CliError::runtime)
    }

    /// Paths each agent drives when alone in the same geometry.
    pub fn desired(&self, spec: &ScenarioSpec) -> Result<Vec<Vec<Vec2>>, CliError> {
        desired_paths(spec, || self.make()).map_err(CliError::runtime)
    }

    /// Episode plus its metrics.
    pub fn evaluate(&self, spec: &ScenarioSpec) -> Result<(TrajectoryLog, Metrics), CliError> {
        let desired = self.desired(spec)?;
        let log = self.episode(spec)?;
        let m = compute_metrics(&log, &desired);
        Ok((log, m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl From<(f64, f64)> for MeanStd {
    fn from((mean, std): (f64, f64)) -> Self {
        Self { mean, std }
    }
}

/// One results-table row: the table's columns and nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub collisions: usize,
    pub deadlocks: usize,
    /// Over runs where both agents arrived; `None` if none did.
    pub makespan_s: Option<MeanStd>,
    pub delta_v: MeanStd,
    pub delta_path: MeanStd,
    pub cycle_time_ms: MeanStd,
}

impl From<&Summary> for TableRow {
    fn from(s: &Summary) -> Self {
        Self {
            collisions: s.collisions,
            deadlocks: s.deadlocks,
            makespan_s: s.makespan.map(MeanStd::from),
            delta_v: s.delta_v.into(),
            delta_path: s.delta_path.into(),
            cycle_time_ms: (s.cycle_time.0 * 1e3, s.cycle_time.1 * 1e3).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: ScenarioKind,
    pub runs: usize,
    pub table: TableRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub id: String,
    pub collision: bool,
    pub deadlock: bool,
    pub reached: bool,
    pub makespan: Option<f64>,
}

impl SuiteResult {
    /// Collision-free and deadlock-free. An agent still moving at the
    /// horizon is live, so reaching the goal is tracked separately.
    pub fn solved(&self) -> bool {
        !self.collision && !self.deadlock
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: ControllerKind,
    pub seed: u64,
    pub jitter: f64,
    pub scenarios: Vec<ScenarioSummary>,
    pub suite: Option<SuiteReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub solved: usize,
    /// Entries where every agent reached its goal within the horizon.
    pub reached: usize,
    pub total: usize,
    pub results: Vec<SuiteResult>,
}

/// Per-run seeds from one stream: `runs` per nominal scenario in order, then
/// one per suite entry.
pub fn run_seeds(seed: u64, kinds: &[ScenarioKind], runs: usize) -> (Vec<Vec<u64>>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nominal = kinds
        .iter()
        .map(|_| (0..runs).map(|_| rng.next_u64()).collect())
        .collect();
    let suite = (0..SUITE_SIZE).map(|_| rng.next_u64()).collect();
    (nominal, suite)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `runs` jittered repetitions of one nominal scenario.
pub fn eval_nominal(
    factory: &ControllerFactory,
    kind: ScenarioKind,
    seeds: &[u64],
    jitter: f64,
) -> Result<Vec<Metrics>, CliError> {
    let nominal = build_scenario(kind, None).map_err(CliError::runtime)?;
    seeds
        .iter()
        .map(|&s| factory.evaluate(&jittered(&nominal, s, jitter)).map(|(_, m)| m))
        .collect()
}

/// Every suite entry once, with start jitter seeded by `seeds[k]`.
pub fn eval_suite(factory: &ControllerFactory, seeds: &[u64], jitter: f64) -> Result<SuiteReport, CliError> {
    let mut results = Vec::new();
    for ((id, spec), &seed) in perturbation_suite().into_iter().zip(seeds) {
        let (_, m) = factory.evaluate(&jittered(&spec, seed, jitter))?;
        results.push(SuiteResult {
            id,
            collision: m.collisions > 0,
            deadlock: m.deadlocks > 0,
            reached: m.makespan.is_some(),
            makespan: m.makespan,
        });
    }
    results.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(SuiteReport {
        solved: results.iter().filter(|r| r.solved()).count(),
        reached: results.iter().filter(|r| r.solved() && r.reached).count(),
        total: results.len(),
        results,
    })
}

pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport, CliError> {
    let factory = ControllerFactory::new(config.controller, config.checkpoint.as_deref())?;
    let kinds = config.scenario.kinds();
    let (seeds, suite_seeds) = run_seeds(config.seed, &kinds, config.runs);
    create_dir(&config.out)?;

    let mut runs_csv = String::from("scenario,run,seed,collision,deadlock,success,makespan,delta_v,delta_path\n");
    let mut scenarios = Vec::new();
    if config.runs > 0 {
        for (kind, seeds) in kinds.iter().zip(&seeds) {
            let ms = eval_nominal(&factory, *kind, seeds, config.jitter)?;
            for (i, (m, s)) in ms.iter().zip(seeds).enumerate() {
                runs_csv.push_str(&format!(
                    "{kind},{i},{s},{},{},{},{},{},{}\n",
                    m.collisions,
                    m.deadlocks,
                    m.success as u8,
                    opt(m.makespan),
                    m.delta_v,
                    m.delta_path
                ));
            }
            scenarios.push(ScenarioSummary {
                scenario: *kind,
                runs: ms.len(),
                table: TableRow::from(&summarize(&ms)),
            });
        }
    }

    let suite = if config.suite {
        Some(eval_suite(&factory, &suite_seeds, config.jitter)?)
    } else {
        None
    };

    let report = EvalReport {
        controller: config.controller,
        seed: config.seed,
        jitter: config.jitter,
        scenarios,
        suite,
    };
    print_report(&report);

    let mut checked = vec![RUNS_FILE];
    write_file(&config.out, RUNS_FILE, runs_csv.as_bytes())?;
    if let Some(s) = &report.suite {
        let mut csv = String::from("id,collision,deadlock,reached,makespan,solved\n");
        for r in &s.results {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id,
                r.collision as u8,
                r.deadlock as u8,
                r.reached as u8,
                opt(r.makespan),
                r.solved() as u8
            ));
        }
        write_file(&config.out, SUITE_FILE, csv.as_bytes())?;
        checked.push(SUITE_FILE);
    }
    // The summary carries wall-clock cycle times, so it is left out of the
    // checksums; every other column is reproduced from runs.csv.
    let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    write_file(&config.out, SUMMARY_FILE, json.as_bytes())?;
    write_checksums(&config.out, &checked)?;

    check_thresholds(config, &report)?;
    Ok(report)
}

fn print_report(r: &EvalReport) {
    let ms = |m: &MeanStd, scale: f64, prec: usize| format!("{:.p$} ± {:.p$}", m.mean * scale, m.std * scale, p = prec);
    if !r.scenarios.is_empty() {
        println!("controller {} (seed {}, jitter {} m)", r.controller, r.seed, r.jitter);
        println!(
            "{:<13} {:>5} {:>6} {:>6} {:>16} {:>18} {:>18} {:>16}",
            "scenario", "runs", "coll", "dead", "makespan (s)", "dV (m/s)", "dPath (m)", "cycle (ms)"
        );
        for s in &r.scenarios {
            let t = &s.table;
            println!(
                "{:<13} {:>5} {:>6} {:>6} {:>16} {:>18} {:>18} {:>16}",
                s.scenario.to_string(),
                s.runs,
                t.collisions,
                t.deadlocks,
                t.makespan_s.as_ref().map_or("-".into(), |m| ms(m, 1.0, 2)),
                ms(&t.delta_v, 1.0, 4),
                ms(&t.delta_path, 1.0, 4),
                ms(&t.cycle_time_ms, 1.0, 3)
            );
        }
    }
    if let Some(s) = &r.suite {
        for x in &s.results {
            let status = match (x.solved(), x.reached) {
                (true, true) => "solved",
                (true, false) => "solved (goal not reached by horizon)",
                _ => "failed",
            };
            println!("suite {:<28} {status}", x.id);
        }
        println!(
            "suite solved: {} / {} (goals reached within horizon: {})",
            s.solved, s.total, s.reached
        );
    }
}

fn check_thresholds(config: &RunConfig, r: &EvalReport) -> Result<(), CliError> {
    let th = &config.thresholds;
    let collisions: usize = r.scenarios.iter().map(|s| s.table.collisions).sum();
    let deadlocks: usize = r.scenarios.iter().map(|s| s.table.deadlocks).sum();
    let mut failures = Vec::new();
    if let Some(max) = th.max_collisions.filter(|&m| collisions > m) {
        failures.push(format!("{collisions} collisions > {max}"));
    }
    if let Some(max) = th.max_deadlocks.filter(|&m| deadlocks > m) {
        failures.push(format!("{deadlocks} deadlocks > {max}"));
    }
    if let Some(min) = th.min_suite_solved {
        match &r.suite {
            Some(s) if s.solved >= min => {}
            Some(s) => failures.push(format!("suite solved {} < {min}", s.solved)),
            None => failures.push("min_suite_solved set but --suite not run".into()),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Threshold(failures.join("; ")))
    }
}

/// Deterministic part of a single run, written as `log.json`.
#[derive(Debug, Serialize)]
struct RunLog<'a> {
    controller: ControllerKind,
    seed: u64,
    jitter: f64,
    scenario: &'a ScenarioSpec,
    metrics: RunMetrics,
    log: &'a TrajectoryLog,
}

#[derive(Debug, Serialize)]
struct RunMetrics {
    collisions: usize,
    deadlocks: usize,
    makespan: Option<f64>,
    delta_v: f64,
    delta_path: f64,
    min_barrier: f64,
    all_optimal: bool,
}

pub fn cmd_run(config: &RunConfig) -> Result<TrajectoryLog, CliError> {
    let kind = match config.scenario.kinds()[..] {
        [k] => k,
        _ => return Err(CliError::Usage("run needs a single scenario".into())),
    };
    let factory = ControllerFactory::new(config.controller, config.checkpoint.as_deref())?;
    let spec = jittered(
        &build_scenario(kind, None).map_err(CliError::runtime)?,
        config.seed,
        config.jitter,
    );
    let (log, m) = factory.evaluate(&spec)?;
    create_dir(&config.out)?;

    let mut csv = Vec::new();
    log.write_csv(&mut csv).map_err(CliError::runtime)?;
    write_file(&config.out, TRAJECTORY_FILE, &csv)?;
    let run = RunLog {
        controller: config.controller,
        seed: config.seed,
        jitter: config.jitter,
        scenario: &spec,
        metrics: RunMetrics {
            collisions: m.collisions,
            deadlocks: m.deadlocks,
            makespan: m.makespan,
            delta_v: m.delta_v,
            delta_path: m.delta_path,
            min_barrier: log.min_barrier(),
            all_optimal: log.all_optimal(),
        },
        log: &log,
    };
    let mut json = serde_json::to_vec_pretty(&run).map_err(CliError::runtime)?;
    json.write_all(b"\n").map_err(CliError::runtime)?;
    write_file(&config.out, LOG_FILE, &json)?;
    write_file(
        &config.out,
        TRAJECTORY_SVG,
        plots::trajectory_svg(&spec, &log).as_bytes(),
    )?;
    write_file(
        &config.out,
        VELOCITY_SVG,
        plots::velocity_svg(&log, spec.limits.v_max).as_bytes(),
    )?;
    write_file(&config.out, BARRIER_SVG, plots::barrier_svg(&log).as_bytes())?;
    write_checksums(
        &config.out,
        &[TRAJECTORY_FILE, LOG_FILE, TRAJECTORY_SVG, VELOCITY_SVG, BARRIER_SVG],
    )?;

    println!(
        "{kind} with {}: collision {}, deadlock {}, makespan {}, min barrier {:.4}",
        config.controller,
        m.collisions,
        m.deadlocks,
        m.makespan.map_or("-".into(), |t| format!("{t:.1} s")),
        log.min_barrier()
    );
    println!("wrote {}", config.out.display());
    Ok(log)
}
