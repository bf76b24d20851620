//! Command-line front end: `train`, `run`, `sweep` and `baseline`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::BicycleParams;
use crate::error::Error;
use crate::learning::{generate_dataset, initial_model, train, TrainingConfig};
use crate::scenario::{relative_change_pct, run_method, Method, PlanningModelSpec, ScenarioConfig, ScenarioOutcome};

pub const OUTPUT_ROOT_ENV: &str = "ENKMP_OUT";
pub const LOSS_SCHEMA: &str = "# enkmp loss history v1";
pub const SWEEP_SCHEMA: &str = "# enkmp sweep v1";

#[derive(Debug, Parser)]
#[command(name = "enkmp", version, about = "Motion planning by ensemble Kalman smoothing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$ENKMP_OUT/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (used by `sweep`).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the surrogate network.
    Train(CommonArgs),
    /// Run one closed-loop scenario with the ensemble planner.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Plan with the analytic bicycle model instead of the configured network.
        #[arg(long)]
        kinematic: bool,
    },
    /// Run a grid of methods, ensemble sizes, horizons and seeds.
    Sweep(CommonArgs),
    /// Run the scenario with the gradient-based penalty planner.
    Baseline {
        #[command(flatten)]
        common: CommonArgs,
        /// Overrides the number of simulated steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        kinematic: bool,
    },
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            message: format!("configuration error: {e}"),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    /// SHA-256 of the parsed configuration re-serialized with defaults filled in.
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub crate_version: String,
    pub model_sha256: Option<String>,
    pub output_dir: PathBuf,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a parsed config; key order and formatting of the source file do not matter.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("configs serialize"))
}

struct ManifestBuilder {
    command: &'static str,
    config_path: PathBuf,
    started: f64,
}

impl ManifestBuilder {
    fn new(command: &'static str, config_path: &Path) -> Self {
        ManifestBuilder {
            command,
            config_path: config_path.to_path_buf(),
            started: unix_now(),
        }
    }

    fn write<T: Serialize>(
        self,
        dir: &Path,
        config: &T,
        seed: Option<u64>,
        model: Option<&Path>,
    ) -> Result<(), CliError> {
        let model_sha256 = match model {
            Some(p) => Some(sha256_hex(&std::fs::read(p).map_err(CliError::runtime)?)),
            None => None,
        };
        let manifest = RunManifest {
            command: self.command.into(),
            config_path: self.config_path,
            config_sha256: config_hash(config),
            config: serde_json::to_value(config).map_err(CliError::runtime)?,
            seed,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            model_sha256,
            output_dir: dir.to_path_buf(),
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(CliError::runtime)?;
        std::fs::write(dir.join("manifest.json"), text).map_err(CliError::runtime)
    }
}

fn output_dir(common: &CommonArgs, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("enkmp-out"), PathBuf::from);
        root.join(command)
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Run { common, kinematic } => cmd_run(&common, kinematic, None, Method::Enks),
        Command::Sweep(common) => cmd_sweep(&common),
        Command::Baseline {
            common,
            steps,
            kinematic,
        } => cmd_run(&common, kinematic, steps, Method::Penalty),
    }
}

pub fn cmd_train(common: &CommonArgs) -> Result<(), CliError> {
    let manifest = ManifestBuilder::new("train", &common.config);
    let mut config: TrainingConfig = read_json(&common.config)?;
    if let Some(seed) = common.seed {
        config.rng_seed = seed;
    }
    config.validate().map_err(CliError::config)?;
    let dir = output_dir(common, "train");
    create_dir(&dir)?;

    let params = BicycleParams::default();
    let data = generate_dataset(&config, &params).map_err(CliError::runtime)?;
    let report = train(&initial_model(&config), &data, &config).map_err(CliError::runtime)?;
    let model_path = dir.join("model.json");
    report.model.save(&model_path).map_err(CliError::runtime)?;
    write_loss_csv(&dir.join("loss.csv"), &report.history).map_err(CliError::runtime)?;
    manifest.write(&dir, &config, Some(config.rng_seed), Some(&model_path))?;

    let last = report.history.last().expect("at least one epoch");
    println!(
        "trained {} samples for {} epochs: train loss {:.3e}, validation loss {:.3e}, validation rmse {:?}",
        data.len(),
        config.epochs,
        last.train,
        last.validation,
        report.validation_rmse
    );
    if let Some(bound) = config.rmse_threshold {
        if report.validation_rmse.iter().zip(&bound).any(|(r, b)| r > b) {
            return Err(CliError::runtime(format!(
                "validation rmse {:?} exceeds threshold {bound:?}",
                report.validation_rmse
            )));
        }
    }
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[crate::learning::EpochLoss]) -> crate::Result<()> {
    let mut file = File::create(path)?;
    writeln!(file, "{LOSS_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "train_loss", "validation_loss"])?;
    for e in history {
        w.write_record([e.epoch.to_string(), e.train.to_string(), e.validation.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn load_scenario(common: &CommonArgs, kinematic: bool) -> Result<ScenarioConfig, CliError> {
    let mut config = ScenarioConfig::load(&common.config).map_err(|e| match e {
        Error::Io(e) => CliError::config(format!("{}: {e}", common.config.display())),
        other => CliError::config(format!("{}: {other}", common.config.display())),
    })?;
    if let Some(seed) = common.seed {
        config.rng_seed = seed;
    }
    if kinematic {
        config.planning_model = PlanningModelSpec::Kinematic;
    }
    config.validate().map_err(CliError::config)?;
    Ok(config)
}

fn model_path(spec: &PlanningModelSpec) -> Option<&Path> {
    match spec {
        PlanningModelSpec::Surrogate { path } => Some(path),
        PlanningModelSpec::Kinematic => None,
    }
}

pub fn cmd_run(common: &CommonArgs, kinematic: bool, steps: Option<usize>, method: Method) -> Result<(), CliError> {
    let command = match method {
        Method::Enks => "run",
        Method::Penalty => "baseline",
    };
    let manifest = ManifestBuilder::new(command, &common.config);
    let mut config = load_scenario(common, kinematic)?;
    if let Some(steps) = steps {
        config.steps = steps;
        config.validate().map_err(CliError::config)?;
    }
    let dir = output_dir(common, command);
    create_dir(&dir)?;
    // the hash covers the scenario, not where this invocation writes it
    let hashed = config.clone();
    config.output_dir = Some(dir.clone());
    let model = config
        .planning_model
        .load(&config.bicycle, config.planner.dt)
        .map_err(CliError::config)?;
    let outcome = run_method(&config, model, method).map_err(CliError::runtime)?;
    manifest.write(&dir, &hashed, Some(config.rng_seed), model_path(&config.planning_model))?;
    let s = &outcome.summary;
    println!(
        "{method}: {} steps, total cost {:.3}, min distance {:.3} m, min boundary margin {:.3} m, mean plan time {:.4} s",
        s.steps_completed, s.total_cost, s.min_distance, s.min_boundary_margin, s.mean_plan_time
    );
    match &s.failure {
        Some(f) => Err(CliError::runtime(format!("planner aborted at {f}; partial records kept"))),
        None => Ok(()),
    }
}

/// Grid of closed-loop runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Scenario file, relative to the sweep file.
    pub scenario: PathBuf,
    pub methods: Vec<Method>,
    pub n_members: Vec<usize>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Overrides the scenario length for the ensemble planner.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Overrides the scenario length for the penalty planner.
    #[serde(default)]
    pub penalty_steps: Option<usize>,
    /// Method whose averages anchor the relative columns; the first aggregate
    /// row with the same horizon is used when absent.
    #[serde(default)]
    pub baseline: Option<Method>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cell {
    pub method: Method,
    pub n_members: Option<usize>,
    pub horizon: usize,
    pub seed: u64,
}

impl Cell {
    fn dir_name(&self) -> String {
        match self.n_members {
            Some(n) => format!("{}_N{n}_H{}_s{}", self.method, self.horizon, self.seed),
            None => format!("{}_H{}_s{}", self.method, self.horizon, self.seed),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.methods.is_empty() || self.horizons.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("methods", "methods, horizons and seeds must be nonempty"));
        }
        if self.methods.contains(&Method::Enks) && self.n_members.is_empty() {
            return Err(Error::config("n_members", "needed for the ensemble planner"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            let sizes: Vec<Option<usize>> = match method {
                Method::Enks => self.n_members.iter().map(|&n| Some(n)).collect(),
                Method::Penalty => vec![None],
            };
            for n_members in sizes {
                for &horizon in &self.horizons {
                    for &seed in &self.seeds {
                        cells.push(Cell {
                            method,
                            n_members,
                            horizon,
                            seed,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<ScenarioOutcome, String>,
}

/// Runs every cell on `threads` workers; each cell writes its own subdirectory.
pub fn run_sweep(base: &ScenarioConfig, sweep: &SweepConfig, dir: &Path, threads: usize) -> Vec<CellResult> {
    let cells = sweep.cells();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let outcome = run_cell(base, sweep, cell, &dir.join(cell.dir_name()));
                results.lock().expect("no poisoned workers")[i] = Some(CellResult {
                    cell: cell.clone(),
                    outcome,
                });
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn run_cell(base: &ScenarioConfig, sweep: &SweepConfig, cell: &Cell, dir: &Path) -> std::result::Result<ScenarioOutcome, String> {
    let mut config = base.clone();
    config.rng_seed = cell.seed;
    config.planner.horizon = cell.horizon;
    if let Some(n) = cell.n_members {
        config.planner.smoother.n_members = n;
    }
    let steps = match cell.method {
        Method::Enks => sweep.steps,
        Method::Penalty => sweep.penalty_steps.or(sweep.steps),
    };
    if let Some(steps) = steps {
        config.steps = steps;
    }
    config.output_dir = Some(dir.to_path_buf());
    let model = config
        .planning_model
        .load(&config.bicycle, config.planner.dt)
        .map_err(|e| e.to_string())?;
    let outcome = run_method(&config, model, cell.method).map_err(|e| e.to_string())?;
    match &outcome.summary.failure {
        Some(f) => Err(f.clone()),
        None => Ok(outcome),
    }
}

/// Averages over seeds for one `(method, N, H)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub method: Method,
    pub n_members: Option<usize>,
    pub horizon: usize,
    pub runs: usize,
    pub total_cost: f64,
    pub avg_plan_time: f64,
    pub cost_change_pct: Option<f64>,
    pub time_change_pct: Option<f64>,
}

pub fn aggregate(results: &[CellResult], baseline: Option<Method>) -> Vec<SweepAggregate> {
    let mut groups: Vec<SweepAggregate> = Vec::new();
    for r in results {
        let Ok(outcome) = &r.outcome else { continue };
        let key = (r.cell.method, r.cell.n_members, r.cell.horizon);
        let idx = match groups
            .iter()
            .position(|g| (g.method, g.n_members, g.horizon) == key)
        {
            Some(i) => i,
            None => {
                groups.push(SweepAggregate {
                    method: key.0,
                    n_members: key.1,
                    horizon: key.2,
                    runs: 0,
                    total_cost: 0.0,
                    avg_plan_time: 0.0,
                    cost_change_pct: None,
                    time_change_pct: None,
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[idx];
        g.runs += 1;
        g.total_cost += outcome.summary.total_cost;
        g.avg_plan_time += outcome.summary.mean_plan_time;
    }
    for g in &mut groups {
        g.total_cost /= g.runs as f64;
        g.avg_plan_time /= g.runs as f64;
    }
    let anchors: Vec<Option<(f64, f64)>> = groups
        .iter()
        .map(|g| {
            groups
                .iter()
                .find(|b| b.horizon == g.horizon && baseline.is_none_or(|m| b.method == m))
                .map(|b| (b.total_cost, b.avg_plan_time))
        })
        .collect();
    for (g, anchor) in groups.iter_mut().zip(anchors) {
        if let Some((cost, time)) = anchor {
            g.cost_change_pct = Some(relative_change_pct(g.total_cost, cost));
            g.time_change_pct = Some(relative_change_pct(g.avg_plan_time, time));
        }
    }
    groups
}

pub fn write_sweep_csv<W: Write>(mut out: W, results: &[CellResult], aggregates: &[SweepAggregate]) -> crate::Result<()> {
    writeln!(out, "{SWEEP_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "row",
        "method",
        "n_members",
        "horizon",
        "seed",
        "runs",
        "total_cost",
        "avg_plan_time_s",
        "min_distance",
        "collisions",
        "boundary_violations",
        "cost_change_pct",
        "time_change_pct",
        "error",
    ])?;
    let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
    let optf = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in results {
        let c = &r.cell;
        let mut row = vec![
            "cell".to_string(),
            c.method.to_string(),
            opt(c.n_members),
            c.horizon.to_string(),
            c.seed.to_string(),
            "1".into(),
        ];
        match &r.outcome {
            Ok(o) => {
                let s = &o.summary;
                row.extend([
                    s.total_cost.to_string(),
                    s.mean_plan_time.to_string(),
                    s.min_distance.to_string(),
                    s.collisions.to_string(),
                    s.boundary_violations.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(e.clone());
            }
        }
        w.write_record(&row)?;
    }
    for g in aggregates {
        w.write_record([
            "mean".to_string(),
            g.method.to_string(),
            opt(g.n_members),
            g.horizon.to_string(),
            String::new(),
            g.runs.to_string(),
            g.total_cost.to_string(),
            g.avg_plan_time.to_string(),
            String::new(),
            String::new(),
            String::new(),
            optf(g.cost_change_pct),
            optf(g.time_change_pct),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(common: &CommonArgs) -> Result<(), CliError> {
    let manifest = ManifestBuilder::new("sweep", &common.config);
    let mut sweep: SweepConfig = read_json(&common.config)?;
    if let Some(seed) = common.seed {
        sweep.seeds = vec![seed];
    }
    sweep.validate().map_err(CliError::config)?;
    let scenario_path = common
        .config
        .parent()
        .unwrap_or(Path::new("."))
        .join(&sweep.scenario);
    let base = ScenarioConfig::load(&scenario_path).map_err(|e| CliError::config(format!("{}: {e}", scenario_path.display())))?;
    base.validate().map_err(CliError::config)?;
    let dir = output_dir(common, "sweep");
    create_dir(&dir)?;

    let results = run_sweep(&base, &sweep, &dir, common.threads);
    let aggregates = aggregate(&results, sweep.baseline);
    let file = File::create(dir.join("sweep.csv")).map_err(CliError::runtime)?;
    write_sweep_csv(file, &results, &aggregates).map_err(CliError::runtime)?;
    manifest.write(&dir, &sweep, common.seed, model_path(&base.planning_model))?;

    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    for g in &aggregates {
        println!(
            "{} N={} H={}: mean cost {:.3}, mean plan time {:.4} s over {} runs",
            g.method,
            g.n_members.map_or("-".into(), |n| n.to_string()),
            g.horizon,
            g.total_cost,
            g.avg_plan_time,
            g.runs
        );
    }
    if failed > 0 {
        println!("{failed} of {} cells failed; see sweep.csv", results.len());
    }
    Ok(())
}
