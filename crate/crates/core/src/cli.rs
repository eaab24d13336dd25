//! Benchmark front end: configuration, matrix execution and result files.
//!
//! A configuration is a JSON document:
//!
//! ```json
//! {
//!   "output": "bench-out",
//!   "experiments": [
//!     { "task": 2, "controller": { "kind": "sequential" },
//!       "m": [3], "n": [3, 4], "seeds": [0, 1, 2] }
//!   ]
//! }
//! ```
//!
//! Omitted experiment fields take the values of [`ExperimentSpec::default`].
//! The output directory receives:
//!
//! - `runs/<id>.csv`: one [`TraceRow`] per step and vehicle;
//! - `runs/<id>.json`: the deterministic [`RunSummary`];
//! - `runs/<id>.timing.json`: the [`RunTiming`];
//! - `aggregate.csv`: one [`AggregateRow`] per experiment cell;
//! - `manifest.csv`: one [`ManifestRow`] per executed run.
//!
//! Centralized baselines needed for `delta_j` that are not runs of the
//! matrix themselves are written under `baselines/` with the same layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::ControllerKind;
use crate::error::BenchError;
use crate::mip::SolverOptions;
use crate::mld::ModelKind;
use crate::mpc::{NormKind, PlatoonConfig};
use crate::sim::{
    aggregate, run_simulation, PlantKind, RunSetup, RunSummary, RunTiming, SimResult, Task,
    TraceRow, DEFAULT_K_SIM,
};

pub const DEFAULT_OUTPUT: &str = "bench-out";
/// Environment variable holding the default output root.
pub const OUTPUT_ENV: &str = "PLATOON_BENCH_OUT";

/// Optional changes to the default platoon parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonOverrides {
    pub q_x: Option<[[f64; 2]; 2]>,
    pub q_u: Option<f64>,
    pub d_safe: Option<f64>,
    pub slack_weight: Option<f64>,
    pub a_min: Option<f64>,
    pub a_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: Option<String>,
    pub task: u8,
    pub controller: ControllerKind,
    pub model: ModelKind,
    pub norm: NormKind,
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    pub seeds: Vec<u64>,
    pub k_sim: usize,
    /// Replaces the task's leader rule when set.
    pub leaders: Option<Vec<usize>>,
    pub platoon: PlatoonOverrides,
    pub solver: SolverOptions,
    pub plant: PlantKind,
    pub max_failures: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: None,
            task: 1,
            controller: ControllerKind::Centralized,
            model: ModelKind::PwaGear,
            norm: NormKind::One,
            m: vec![3],
            n: vec![4],
            seeds: vec![0],
            k_sim: DEFAULT_K_SIM,
            leaders: None,
            platoon: PlatoonOverrides::default(),
            solver: SolverOptions::default(),
            plant: PlantKind::default(),
            max_failures: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn task(&self) -> Result<Task, BenchError> {
        Task::standard(self.task)
            .map(|t| t.with_k_sim(self.k_sim))
            .map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn base_config(&self) -> PlatoonConfig {
        let o = &self.platoon;
        let mut cfg = PlatoonConfig {
            model: self.model,
            norm: self.norm,
            ..PlatoonConfig::default()
        };
        cfg.q_x = o.q_x.unwrap_or(cfg.q_x);
        cfg.q_u = o.q_u.unwrap_or(cfg.q_u);
        cfg.d_safe = o.d_safe.unwrap_or(cfg.d_safe);
        cfg.slack_weight = o.slack_weight.unwrap_or(cfg.slack_weight);
        cfg.a_min = o.a_min.unwrap_or(cfg.a_min);
        cfg.a_max = o.a_max.unwrap_or(cfg.a_max);
        cfg
    }

    pub fn leaders_for(&self, m: usize) -> Result<Vec<usize>, BenchError> {
        Ok(match &self.leaders {
            Some(l) => l.clone(),
            None => self.task()?.leaders(m),
        })
    }

    fn validate(&self, idx: usize) -> Result<(), BenchError> {
        let bad = |msg: String| BenchError::Config(format!("experiments[{idx}]: {msg}"));
        let task = self.task().map_err(|e| bad(e.to_string()))?;
        if self.m.is_empty() || self.n.is_empty() || self.seeds.is_empty() {
            return Err(bad("m, n and seeds must be non-empty".into()));
        }
        if self.k_sim == 0 {
            return Err(bad("k_sim must be at least 1".into()));
        }
        if let Err(e) = self.controller.validate() {
            return Err(bad(format!("controller: {e}")));
        }
        if let Err(e) = self.solver.validate() {
            return Err(bad(format!("solver: {e}")));
        }
        if let PlantKind::Nonlinear { substeps: 0 } = self.plant {
            return Err(bad("plant needs at least one substep".into()));
        }
        for &m in &self.m {
            for &n in &self.n {
                let leaders = self.leaders_for(m)?;
                if leaders.is_empty() {
                    return Err(bad(format!("no leader for M = {m}")));
                }
                for l in leaders {
                    let mut setup = RunSetup::new(task.clone(), self.controller.clone(), m, n, 0);
                    setup.base = self.base_config();
                    setup.leader = Some(l);
                    if let Err(e) = setup.platoon_config() {
                        return Err(bad(format!("M = {m}, N = {n}, leader = {l}: {e}")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub experiments: Vec<ExperimentSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from(DEFAULT_OUTPUT)
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<BenchmarkConfig, BenchError> {
    let cfg: BenchmarkConfig = serde_json::from_str(text).map_err(|e| BenchError::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.experiments.is_empty() {
            return Err(BenchError::Config("no experiments".into()));
        }
        for (i, e) in self.experiments.iter().enumerate() {
            e.validate(i)?;
        }
        Ok(())
    }

    /// Pretty JSON with every default spelled out.
    pub fn canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replace every seed list.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for e in &mut self.experiments {
            e.seeds = vec![seed];
        }
        self
    }

    /// The runs of the matrix, in a fixed order.
    pub fn expand(&self) -> Result<Vec<PlannedRun>, BenchError> {
        let mut out = Vec::new();
        for (idx, e) in self.experiments.iter().enumerate() {
            let task = e.task()?;
            for &m in &e.m {
                for &n in &e.n {
                    for leader in e.leaders_for(m)? {
                        for &seed in &e.seeds {
                            let mut setup =
                                RunSetup::new(task.clone(), e.controller.clone(), m, n, seed);
                            setup.base = e.base_config();
                            setup.solver = e.solver.clone();
                            setup.leader = Some(leader);
                            setup.plant = e.plant;
                            setup.max_failures = e.max_failures;
                            out.push(PlannedRun {
                                experiment: idx,
                                id: run_id(Some(idx), &setup, leader),
                                setup,
                                leader,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One run of the expanded matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub experiment: usize,
    pub id: String,
    pub leader: usize,
    pub setup: RunSetup,
}

fn run_id(experiment: Option<usize>, s: &RunSetup, leader: usize) -> String {
    let prefix = match experiment {
        Some(e) => format!("e{e}"),
        None => "base".to_string(),
    };
    format!(
        "{prefix}_t{}_{}_m{}_n{}_l{}_s{}",
        s.task.id,
        s.controller.label(),
        s.m,
        s.horizon,
        leader,
        s.seed
    )
}

/// Everything but the controller, used to pair runs with their baseline.
fn baseline_signature(s: &RunSetup) -> String {
    serde_json::json!({
        "task": s.task,
        "base": s.base,
        "solver": s.solver,
        "m": s.m,
        "n": s.horizon,
        "seed": s.seed,
        "leader": s.leader,
        "plant": s.plant,
        "max_failures": s.max_failures,
    })
    .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunRole {
    Run,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub role: RunRole,
    pub experiment: Option<usize>,
    pub task: u8,
    pub controller: String,
    pub m: usize,
    pub n: usize,
    pub leader: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub trace: Option<String>,
    pub summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: usize,
    pub name: Option<String>,
    pub task: u8,
    pub controller: String,
    pub model: ModelKind,
    pub norm: NormKind,
    pub m: usize,
    pub n: usize,
    pub leader: usize,
    pub runs: usize,
    pub failed: usize,
    pub j_mean: Option<f64>,
    pub j_std: Option<f64>,
    pub delta_j_mean: Option<f64>,
    pub delta_j_std: Option<f64>,
    pub t_min: Option<f64>,
    pub t_avg: Option<f64>,
    pub t_max: Option<f64>,
    pub n_no: usize,
    pub breaches: usize,
    pub messages: usize,
}

/// What a matrix execution produced.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOutcome {
    pub runs: usize,
    pub baselines: usize,
    /// Matrix runs that did not complete.
    pub failures: usize,
    pub manifest: Vec<ManifestRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl MatrixOutcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failures > 0)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_run(dir: &Path, id: &str, r: &SimResult) -> Result<(String, String), BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let trace = dir.join(format!("{id}.csv"));
    let mut w = csv::Writer::from_path(&trace)?;
    for row in &r.traces {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(&trace))?;
    let summary = dir.join(format!("{id}.json"));
    let text = serde_json::to_string_pretty(&r.summary)?;
    fs::write(&summary, text).map_err(io_err(&summary))?;
    let timing = dir.join(format!("{id}.timing.json"));
    let text = serde_json::to_string_pretty(&r.timing)?;
    fs::write(&timing, text).map_err(io_err(&timing))?;
    Ok((trace.display().to_string(), summary.display().to_string()))
}

type Executed = Result<SimResult, String>;

fn execute(setups: &[&RunSetup], workers: usize) -> Vec<Executed> {
    let work = || {
        setups
            .par_iter()
            .map(|s| run_simulation(s).map_err(|e| e.to_string()))
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(work),
        Err(e) => {
            log::warn!("falling back to the global thread pool: {e}");
            work()
        }
    }
}

/// Run the expanded matrix with `workers` parallel runs and write every
/// output below `out`. Individual run failures are recorded, not raised.
pub fn run_matrix(
    cfg: &BenchmarkConfig,
    out: &Path,
    workers: usize,
) -> Result<MatrixOutcome, BenchError> {
    cfg.validate()?;
    let planned = cfg.expand()?;
    let workers = workers.max(1);
    fs::create_dir_all(out).map_err(io_err(out))?;
    let canonical = out.join("config.json");
    fs::write(&canonical, cfg.canonical()).map_err(io_err(&canonical))?;

    // Centralized runs first, deduplicated by everything except the
    // controller; matrix runs that are centralized serve as their own
    // baseline.
    let mut baseline_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut central: Vec<(Option<usize>, RunSetup)> = Vec::new();
    for (i, p) in planned.iter().enumerate() {
        if p.setup.controller == ControllerKind::Centralized {
            let sig = baseline_signature(&p.setup);
            if !baseline_of.contains_key(&sig) {
                baseline_of.insert(sig, central.len());
                central.push((Some(i), p.setup.clone()));
            }
        }
    }
    for p in &planned {
        let sig = baseline_signature(&p.setup);
        if !baseline_of.contains_key(&sig) {
            let mut s = p.setup.clone();
            s.controller = ControllerKind::Centralized;
            baseline_of.insert(sig, central.len());
            central.push((None, s));
        }
    }
    log::info!(
        "{} runs planned, {} centralized baselines",
        planned.len(),
        central.len()
    );
    let central_results = execute(&central.iter().map(|c| &c.1).collect::<Vec<_>>(), workers);
    let baseline_j: Vec<Option<f64>> = central_results
        .iter()
        .map(|r| {
            r.as_ref()
                .ok()
                .filter(|r| r.completed())
                .map(|r| r.summary.j)
        })
        .collect();

    let mut results: Vec<Option<Executed>> = vec![None; planned.len()];
    for ((owner, _), r) in central.iter().zip(central_results.iter()) {
        if let Some(i) = owner {
            results[*i] = Some(r.clone());
        }
    }
    let pending: Vec<usize> = (0..planned.len())
        .filter(|&i| results[i].is_none())
        .collect();
    let rest = execute(
        &pending
            .iter()
            .map(|&i| &planned[i].setup)
            .collect::<Vec<_>>(),
        workers,
    );
    for (i, r) in pending.into_iter().zip(rest) {
        results[i] = Some(r);
    }

    let mut manifest = Vec::new();
    let mut failures = 0;
    let mut finished: Vec<Option<SimResult>> = Vec::with_capacity(planned.len());
    for (p, r) in planned.iter().zip(results) {
        let r = r.expect("every planned run executed");
        let (ok, error, files, res) = match r {
            Ok(mut res) => {
                let sig = baseline_signature(&p.setup);
                if let Some(j) = baseline_j[baseline_of[&sig]] {
                    res.set_baseline(j);
                }
                let files = write_run(&out.join("runs"), &p.id, &res)?;
                (
                    res.completed(),
                    res.summary.error.clone(),
                    Some(files),
                    Some(res),
                )
            }
            Err(e) => (false, Some(e), None, None),
        };
        failures += usize::from(!ok);
        if let Some(e) = &error {
            log::warn!("run {} failed: {e}", p.id);
        }
        manifest.push(ManifestRow {
            id: p.id.clone(),
            role: RunRole::Run,
            experiment: Some(p.experiment),
            task: p.setup.task.id,
            controller: p.setup.controller.label().to_string(),
            m: p.setup.m,
            n: p.setup.horizon,
            leader: p.leader,
            seed: p.setup.seed,
            ok,
            error,
            trace: files.as_ref().map(|f| f.0.clone()),
            summary: files.map(|f| f.1),
        });
        finished.push(res);
    }
    let mut baselines = 0;
    for ((owner, setup), r) in central.iter().zip(central_results) {
        if owner.is_some() {
            continue;
        }
        baselines += 1;
        let leader = setup.leader.unwrap_or(0);
        let id = run_id(None, setup, leader);
        let (ok, error, files) = match r {
            Ok(res) => {
                let files = write_run(&out.join("baselines"), &id, &res)?;
                (res.completed(), res.summary.error.clone(), Some(files))
            }
            Err(e) => (false, Some(e), None),
        };
        manifest.push(ManifestRow {
            id,
            role: RunRole::Baseline,
            experiment: None,
            task: setup.task.id,
            controller: setup.controller.label().to_string(),
            m: setup.m,
            n: setup.horizon,
            leader,
            seed: setup.seed,
            ok,
            error,
            trace: files.as_ref().map(|f| f.0.clone()),
            summary: files.map(|f| f.1),
        });
    }
    write_csv(&out.join("manifest.csv"), &manifest)?;

    let aggregate_rows = aggregate_cells(cfg, &planned, &finished);
    write_csv(&out.join("aggregate.csv"), &aggregate_rows)?;
    Ok(MatrixOutcome {
        runs: planned.len(),
        baselines,
        failures,
        manifest,
        aggregate: aggregate_rows,
    })
}

fn aggregate_cells(
    cfg: &BenchmarkConfig,
    planned: &[PlannedRun],
    finished: &[Option<SimResult>],
) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(usize, usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in planned.iter().enumerate() {
        cells
            .entry((p.experiment, p.setup.m, p.setup.horizon, p.leader))
            .or_default()
            .push(i);
    }
    cells
        .into_iter()
        .map(|((e, m, n, leader), idx)| {
            let spec = &cfg.experiments[e];
            let done: Vec<SimResult> = idx.iter().filter_map(|&i| finished[i].clone()).collect();
            let report = aggregate(&done).ok();
            let failed = idx.len() - done.iter().filter(|r| r.completed()).count();
            AggregateRow {
                experiment: e,
                name: spec.name.clone(),
                task: spec.task,
                controller: spec.controller.label().to_string(),
                model: spec.model,
                norm: spec.norm,
                m,
                n,
                leader,
                runs: idx.len(),
                failed,
                j_mean: report.as_ref().map(|r| r.j_mean),
                j_std: report.as_ref().map(|r| r.j_std),
                delta_j_mean: report.as_ref().and_then(|r| r.delta_j_mean),
                delta_j_std: report.as_ref().and_then(|r| r.delta_j_std),
                t_min: report.as_ref().and_then(|r| r.t_comp).map(|t| t.min),
                t_avg: report.as_ref().and_then(|r| r.t_comp).map(|t| t.avg),
                t_max: report.as_ref().and_then(|r| r.t_comp).map(|t| t.max),
                n_no: report.as_ref().map_or(0, |r| r.n_no),
                breaches: report.as_ref().map_or(0, |r| r.breaches),
                messages: report.as_ref().map_or(0, |r| r.messages),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BenchError> {
    if !path.exists() {
        return Err(BenchError::MissingRuns(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(BenchError::from))
        .collect()
}

pub fn read_summary(path: &Path) -> Result<RunSummary, BenchError> {
    let text = fs::read_to_string(path)
        .map_err(|_| BenchError::MissingRuns(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_timing(path: &Path) -> Result<RunTiming, BenchError> {
    let text = fs::read_to_string(path)
        .map_err(|_| BenchError::MissingRuns(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    /// Per-run position, spacing and velocity series.
    Trajectory,
    /// Metrics against M and against N per controller.
    Sweep,
}

/// Header and rows of a trajectory plot file. Spacing columns hold the gap of
/// each adjacent pair.
fn trajectory_table(rows: &[TraceRow], d_safe: f64, dt: f64) -> (Vec<String>, Vec<Vec<String>>) {
    let m = rows.iter().map(|r| r.vehicle + 1).max().unwrap_or(0);
    let mut header: Vec<String> = [
        "step",
        "time",
        "reference_position",
        "reference_velocity",
        "d_safe",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..m).map(|i| format!("position_{i}")));
    header.extend((1..m).map(|i| format!("spacing_{}_{i}", i - 1)));
    header.extend((0..m).map(|i| format!("velocity_{i}")));
    let mut out = Vec::new();
    for step_rows in rows.chunks(m.max(1)) {
        let first = &step_rows[0];
        let mut line = vec![
            first.step.to_string(),
            (first.step as f64 * dt).to_string(),
            first.reference_position.to_string(),
            first.reference_velocity.to_string(),
            d_safe.to_string(),
        ];
        line.extend(step_rows.iter().map(|r| r.position.to_string()));
        line.extend(
            step_rows
                .windows(2)
                .map(|w| (w[0].position - w[1].position).to_string()),
        );
        line.extend(step_rows.iter().map(|r| r.velocity.to_string()));
        out.push(line);
    }
    (header, out)
}

/// One point of a sweep series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub controller: String,
    pub task: u8,
    pub model: ModelKind,
    pub norm: NormKind,
    /// The other dimension, held fixed along the series.
    pub fixed: usize,
    pub value: usize,
    pub runs: usize,
    pub j_mean: f64,
    pub delta_j_mean: Option<f64>,
    pub t_avg: Option<f64>,
    pub n_no: usize,
    pub messages_mean: f64,
}

/// Write plot-ready CSV files below `out/plots` from the outputs of a
/// finished matrix in `out`. Returns the written paths.
pub fn emit_plot_data(out: &Path, kind: PlotKind) -> Result<Vec<PathBuf>, BenchError> {
    let manifest: Vec<ManifestRow> = read_csv(&out.join("manifest.csv"))?;
    let runs: Vec<&ManifestRow> = manifest
        .iter()
        .filter(|r| r.role == RunRole::Run && r.ok)
        .collect();
    if runs.is_empty() {
        return Err(BenchError::MissingRuns(
            "no completed runs in the manifest".into(),
        ));
    }
    let plots = out.join("plots");
    fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    let config_path = out.join("config.json");
    let cfg_text = fs::read_to_string(&config_path)
        .map_err(|_| BenchError::MissingRuns(config_path.display().to_string()))?;
    let cfg: BenchmarkConfig = serde_json::from_str(&cfg_text)?;
    let mut written = Vec::new();
    match kind {
        PlotKind::Trajectory => {
            for r in runs {
                let trace = r
                    .trace
                    .as_ref()
                    .ok_or_else(|| BenchError::MissingRuns(r.id.clone()))?;
                let rows: Vec<TraceRow> = read_csv(Path::new(trace))?;
                let spec = &cfg.experiments[r.experiment.unwrap_or(0)];
                let base = spec.base_config();
                let (header, lines) = trajectory_table(&rows, base.d_safe, base.dt);
                let path = plots.join(format!("{}.trajectory.csv", r.id));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(&header)?;
                for l in lines {
                    w.write_record(&l)?;
                }
                w.flush().map_err(io_err(&path))?;
                written.push(path);
            }
        }
        PlotKind::Sweep => {
            let mut summaries = Vec::new();
            for r in runs {
                let path = r
                    .summary
                    .as_ref()
                    .ok_or_else(|| BenchError::MissingRuns(r.id.clone()))?;
                let s = read_summary(Path::new(path))?;
                let stem = path.strip_suffix(".json").unwrap_or(path);
                let timing = read_timing(&PathBuf::from(format!("{stem}.timing.json")))?;
                summaries.push((s, timing));
            }
            for (name, by_m) in [("sweep_m.csv", true), ("sweep_n.csv", false)] {
                let rows = sweep_rows(&summaries, by_m);
                let path = plots.join(name);
                write_csv(&path, &rows)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn sweep_rows(summaries: &[(RunSummary, RunTiming)], by_m: bool) -> Vec<SweepRow> {
    type Key = (String, u8, String, String, usize, usize);
    let mut groups: BTreeMap<Key, Vec<&(RunSummary, RunTiming)>> = BTreeMap::new();
    let mut meta: BTreeMap<Key, (ModelKind, NormKind)> = BTreeMap::new();
    for e in summaries {
        let s = &e.0;
        let (fixed, value) = if by_m {
            (s.horizon, s.m)
        } else {
            (s.m, s.horizon)
        };
        let key = (
            s.controller.clone(),
            s.task,
            format!("{:?}", s.model),
            format!("{:?}", s.norm),
            fixed,
            value,
        );
        meta.insert(key.clone(), (s.model, s.norm));
        groups.entry(key).or_default().push(e);
    }
    groups
        .into_iter()
        .map(|(key, g)| {
            let n = g.len() as f64;
            let djs: Vec<f64> = g.iter().filter_map(|e| e.0.delta_j).collect();
            let times: Vec<f64> = g.iter().filter_map(|e| e.1.t_comp.map(|t| t.avg)).collect();
            let (model, norm) = meta[&key];
            SweepRow {
                controller: key.0.clone(),
                task: key.1,
                model,
                norm,
                fixed: key.4,
                value: key.5,
                runs: g.len(),
                j_mean: g.iter().map(|e| e.0.j).sum::<f64>() / n,
                delta_j_mean: (!djs.is_empty()).then(|| djs.iter().sum::<f64>() / djs.len() as f64),
                t_avg: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
                n_no: g.iter().map(|e| e.0.n_no).max().unwrap_or(0),
                messages_mean: g.iter().map(|e| e.0.messages as f64).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Human-readable list of the expanded matrix.
pub fn describe_matrix(cfg: &BenchmarkConfig) -> Result<Vec<String>, BenchError> {
    let planned = cfg.expand()?;
    let unique: BTreeSet<&str> = planned.iter().map(|p| p.id.as_str()).collect();
    if unique.len() != planned.len() {
        return Err(BenchError::Config(
            "duplicate runs in the expanded matrix".into(),
        ));
    }
    Ok(planned.iter().map(|p| p.id.clone()).collect())
}
