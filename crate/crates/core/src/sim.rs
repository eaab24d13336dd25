//! Closed-loop benchmark engine.
//!
//! A run samples an initial formation and vehicle masses, generates the
//! leader reference, and then alternates controller steps with plant
//! integration for `k_sim` steps. Everything random is drawn from ChaCha8
//! streams keyed by the run seed, so a run is a pure function of its setup
//! apart from wall-clock timings, which are kept out of [`RunSummary`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::{Command, Controller, ControllerKind};
use crate::error::SimError;
use crate::mip::SolverOptions;
use crate::mld::{BoxBounds, ModelKind};
use crate::models::{
    build_pwa_model, integrate_with_trace, nearest_valid_gear, step_model1, step_model2, Gear,
    GearTable, PwaFriction, State, VehicleParams, DEFAULT_SUBSTEPS,
};
use crate::mpc::{spacing_gap, stage_cost, PlatoonConfig, SpacingPolicy};

/// Mass value reported in the literature for both prediction models, kept
/// for side-by-side comparison only.
pub const REPORTED_MASS_BOUND: f64 = 2.82;

const STREAM_INITIAL: u64 = 0;
const STREAM_MASSES: u64 = 1;
const STREAM_REFERENCE: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LeaderRule {
    /// Zero-based leader index.
    Fixed { index: usize },
    /// Every vehicle except the front one leads in turn.
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MassSampler {
    Constant {
        mass: f64,
    },
    /// Independent draw per vehicle.
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl MassSampler {
    pub fn sample(&self, m: usize, seed: u64) -> Vec<f64> {
        match *self {
            MassSampler::Constant { mass } => vec![mass; m],
            MassSampler::Uniform { lo, hi } => {
                let mut r = rng(seed, STREAM_MASSES);
                (0..m).map(|_| r.gen_range(lo..=hi)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceProfile {
    ConstantSpeed {
        velocity: f64,
    },
    /// Seeded segments of constant acceleration drawn from
    /// `{a_min, 0, a_max} * scale`, with the velocity kept `margin` inside
    /// the prediction box.
    PiecewiseAcceleration {
        initial_velocity: f64,
        min_segment: usize,
        max_segment: usize,
        scale: f64,
        margin: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u8,
    pub spacing: SpacingPolicy,
    pub leader: LeaderRule,
    pub masses: MassSampler,
    pub reference: ReferenceProfile,
    pub k_sim: usize,
}

pub const DEFAULT_K_SIM: usize = 100;

impl Task {
    /// The three benchmark tasks with their default parameters.
    pub fn standard(id: u8) -> Result<Task, SimError> {
        let varying = ReferenceProfile::PiecewiseAcceleration {
            initial_velocity: 20.0,
            min_segment: 10,
            max_segment: 20,
            scale: 0.8,
            margin: 2.0,
        };
        let uniform = MassSampler::Uniform {
            lo: 700.0,
            hi: 1000.0,
        };
        let velocity_dependent = SpacingPolicy::VelocityDependent { d0: 10.0, t0: 3.0 };
        let (spacing, leader, masses, reference) = match id {
            1 => (
                SpacingPolicy::ConstantDistance { d0: 50.0 },
                LeaderRule::Fixed { index: 0 },
                MassSampler::Constant { mass: 800.0 },
                ReferenceProfile::ConstantSpeed { velocity: 20.0 },
            ),
            2 => (
                velocity_dependent,
                LeaderRule::Fixed { index: 0 },
                uniform,
                varying,
            ),
            3 => (velocity_dependent, LeaderRule::Sweep, uniform, varying),
            _ => return Err(SimError::Setup(format!("unknown task id {id}"))),
        };
        Ok(Task {
            id,
            spacing,
            leader,
            masses,
            reference,
            k_sim: DEFAULT_K_SIM,
        })
    }

    pub fn with_k_sim(mut self, k_sim: usize) -> Self {
        self.k_sim = k_sim;
        self
    }

    /// Leaders a platoon of size `m` is run with.
    pub fn leaders(&self, m: usize) -> Vec<usize> {
        match self.leader {
            LeaderRule::Fixed { index } => vec![index],
            LeaderRule::Sweep => (1..m).collect(),
        }
    }

    pub fn validate(&self, m: usize) -> Result<(), SimError> {
        let bad = |s: String| Err(SimError::Setup(s));
        if m == 0 {
            return bad("platoon must contain at least one vehicle".into());
        }
        let leaders = self.leaders(m);
        if leaders.is_empty() {
            return bad(format!(
                "task {} has no admissible leader for M = {m}",
                self.id
            ));
        }
        if let Some(l) = leaders.iter().find(|&&l| l >= m) {
            return bad(format!("leader {l} outside a platoon of {m}"));
        }
        match self.masses {
            MassSampler::Constant { mass } if !(mass > 0.0) => {
                return bad("mass must be positive".into())
            }
            MassSampler::Uniform { lo, hi } if !(lo > 0.0 && lo <= hi) => {
                return bad("mass range must be positive and ordered".into())
            }
            _ => {}
        }
        if let ReferenceProfile::PiecewiseAcceleration {
            min_segment,
            max_segment,
            scale,
            margin,
            ..
        } = self.reference
        {
            if min_segment == 0 || min_segment > max_segment {
                return bad("reference segment lengths must be positive and ordered".into());
            }
            if !(0.0..=1.0).contains(&scale) || margin < 0.0 {
                return bad("reference scale must lie in [0, 1] and margin be nonnegative".into());
            }
        }
        Ok(())
    }
}

/// Reference states for steps `0..len`, starting at position 0.
pub fn reference_trajectory(
    profile: &ReferenceProfile,
    cfg: &PlatoonConfig,
    seed: u64,
    len: usize,
) -> Vec<State> {
    let dt = cfg.dt;
    match *profile {
        ReferenceProfile::ConstantSpeed { velocity } => (0..len)
            .map(|k| State::new(k as f64 * velocity * dt, velocity))
            .collect(),
        ReferenceProfile::PiecewiseAcceleration {
            initial_velocity,
            min_segment,
            max_segment,
            scale,
            margin,
        } => {
            let (lo, hi) = (cfg.bounds.v_min + margin, cfg.bounds.v_max - margin);
            let choices = [cfg.a_min * scale, 0.0, cfg.a_max * scale];
            let mut r = rng(seed, STREAM_REFERENCE);
            let mut out = Vec::with_capacity(len);
            let mut x = State::new(0.0, initial_velocity.clamp(lo, hi));
            let (mut acc, mut left) = (0.0, 0usize);
            while out.len() < len {
                out.push(x);
                if left == 0 {
                    acc = choices[r.gen_range(0..choices.len())];
                    left = r.gen_range(min_segment..=max_segment);
                }
                left -= 1;
                let v = (x.velocity + acc * dt).clamp(lo, hi);
                x = State::new(x.position + 0.5 * (x.velocity + v) * dt, v);
            }
            out
        }
    }
}

/// Random formation: velocities on `[5, 35]` m/s, gaps on `[60, 160]` m,
/// front vehicle at position 0.
pub fn sample_initial_conditions(m: usize, seed: u64) -> Vec<State> {
    let mut r = rng(seed, STREAM_INITIAL);
    let mut position = 0.0;
    (0..m)
        .map(|i| {
            if i > 0 {
                position -= r.gen_range(60.0..=160.0);
            }
            State::new(position, r.gen_range(5.0..=35.0))
        })
        .collect()
}

/// What the commands are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlantKind {
    /// Nonlinear vehicle ODE integrated with RK4.
    Nonlinear { substeps: usize },
    /// The controller's own prediction model, one Euler step per sample.
    PredictionModel,
}

impl Default for PlantKind {
    fn default() -> Self {
        PlantKind::Nonlinear {
            substeps: DEFAULT_SUBSTEPS,
        }
    }
}

/// Everything one closed-loop run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub task: Task,
    pub controller: ControllerKind,
    /// Provides model, norm, weights, bounds and vehicle constants; platoon
    /// size, masses, leader, spacing and horizon are overwritten per run.
    pub base: PlatoonConfig,
    pub solver: SolverOptions,
    pub m: usize,
    pub horizon: usize,
    pub seed: u64,
    /// `None` picks the first leader of the task rule.
    pub leader: Option<usize>,
    pub plant: PlantKind,
    /// Sampled when `None`.
    pub initial_states: Option<Vec<State>>,
    /// Sampled when `None`.
    pub masses: Option<Vec<f64>>,
    /// Consecutive failed controller steps tolerated before the run aborts.
    /// Failed steps replay the last successful plans.
    pub max_failures: usize,
}

impl RunSetup {
    pub fn new(
        task: Task,
        controller: ControllerKind,
        m: usize,
        horizon: usize,
        seed: u64,
    ) -> Self {
        Self {
            task,
            controller,
            base: PlatoonConfig::default(),
            solver: SolverOptions::default(),
            m,
            horizon,
            seed,
            leader: None,
            plant: PlantKind::default(),
            initial_states: None,
            masses: None,
            max_failures: 0,
        }
    }

    pub fn leader(&self) -> Result<usize, SimError> {
        match self.leader {
            Some(l) => Ok(l),
            None => self
                .task
                .leaders(self.m)
                .first()
                .copied()
                .ok_or_else(|| SimError::Setup("task rule yields no leader".into())),
        }
    }

    /// The controller configuration of this run.
    pub fn platoon_config(&self) -> Result<PlatoonConfig, SimError> {
        self.task.validate(self.m)?;
        let masses = match &self.masses {
            Some(ms) if ms.len() != self.m => {
                return Err(SimError::Setup(format!(
                    "{} masses given for {} vehicles",
                    ms.len(),
                    self.m
                )))
            }
            Some(ms) => ms.clone(),
            None => self.task.masses.sample(self.m, self.seed),
        };
        let template = self.base.vehicles.first().copied().unwrap_or_default();
        let mut cfg = self.base.clone();
        cfg.vehicles = masses
            .iter()
            .map(|&mass| VehicleParams { mass, ..template })
            .collect();
        cfg.horizon = self.horizon;
        cfg.leader = self.leader()?;
        cfg.spacing = self.task.spacing;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn initial(&self) -> Result<Vec<State>, SimError> {
        match &self.initial_states {
            Some(s) if s.len() != self.m => Err(SimError::Setup(format!(
                "{} initial states given for {} vehicles",
                s.len(),
                self.m
            ))),
            Some(s) => Ok(s.clone()),
            None => Ok(sample_initial_conditions(self.m, self.seed)),
        }
    }
}

/// One vehicle at one step. Input columns are empty on the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub vehicle: usize,
    pub position: f64,
    pub velocity: f64,
    pub reference_position: f64,
    pub reference_velocity: f64,
    pub throttle: Option<f64>,
    pub gear: Option<u8>,
    /// The planned gear was invalid at the measured velocity.
    pub gear_adjusted: bool,
    /// The measured velocity lay outside the prediction box.
    pub velocity_clamped: bool,
    /// The plant evaluated its traction curve beyond the tabulated span.
    pub traction_clamped: bool,
    /// The command replayed an older plan after a controller failure.
    pub fallback: bool,
}

/// Computation statistics of one completed controller step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub computation_time: f64,
    pub max_nodes: usize,
    pub messages: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeTriple {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

impl TimeTriple {
    pub fn from_samples(samples: &[f64]) -> Option<TimeTriple> {
        if samples.is_empty() {
            return None;
        }
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let avg = (samples.iter().sum::<f64>() / samples.len() as f64).clamp(min, max);
        Some(TimeTriple { min, avg, max })
    }
}

/// Deterministic metrics of one run. Timing lives in [`RunTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: u8,
    pub controller: String,
    pub controller_kind: ControllerKind,
    pub model: ModelKind,
    pub norm: crate::mpc::NormKind,
    pub m: usize,
    pub horizon: usize,
    pub seed: u64,
    pub leader: usize,
    pub masses: Vec<f64>,
    pub k_sim: usize,
    pub steps_completed: usize,
    pub j: f64,
    pub delta_j: Option<f64>,
    pub n_no: usize,
    pub breaches: usize,
    pub min_gap_margin: f64,
    pub messages: usize,
    pub payload: usize,
    pub iterations: usize,
    pub fallback_steps: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub t_comp: Option<TimeTriple>,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub summary: RunSummary,
    pub timing: RunTiming,
    pub traces: Vec<TraceRow>,
    pub steps: Vec<StepRecord>,
    pub config: PlatoonConfig,
    pub reference: Vec<State>,
}

impl SimResult {
    pub fn completed(&self) -> bool {
        self.summary.error.is_none()
    }

    /// Platoon states per recorded step.
    pub fn states(&self) -> Vec<Vec<State>> {
        group_rows(&self.traces, self.summary.m, |r| {
            State::new(r.position, r.velocity)
        })
    }

    /// Applied throttles per step that has them.
    pub fn inputs(&self) -> Vec<Vec<f64>> {
        group_rows(&self.traces, self.summary.m, |r| r.throttle)
            .into_iter()
            .take_while(|row| row.iter().all(Option::is_some))
            .map(|row| row.into_iter().flatten().collect())
            .collect()
    }

    /// Fill in `J - J_cent` against a paired centralized run.
    pub fn set_baseline(&mut self, j_centralized: f64) {
        self.summary.delta_j = Some(self.summary.j - j_centralized);
    }
}

fn group_rows<T>(rows: &[TraceRow], m: usize, f: impl Fn(&TraceRow) -> T) -> Vec<Vec<T>> {
    rows.chunks(m).map(|c| c.iter().map(&f).collect()).collect()
}

/// Closed-loop cost over steps `0..states.len()`: leader tracking, spacing
/// and input terms in the controller's norm and weights. Steps without a
/// recorded input contribute only their state terms.
pub fn tracking_cost(
    cfg: &PlatoonConfig,
    states: &[Vec<State>],
    inputs: &[Vec<f64>],
    reference: &[State],
) -> f64 {
    states
        .iter()
        .enumerate()
        .map(|(k, x)| stage_cost(cfg, x, inputs.get(k).map(|u| u.as_slice()), reference[k]))
        .sum()
}

/// Number of `(step, adjacent pair)` events with a gap below `d_safe`, and
/// the smallest `gap - d_safe` seen.
pub fn count_breaches(states: &[Vec<State>], d_safe: f64) -> (usize, f64) {
    let mut count = 0;
    let mut margin = f64::INFINITY;
    for x in states {
        for w in x.windows(2) {
            let gap = w[0].position - w[1].position;
            margin = margin.min(gap - d_safe);
            if gap < d_safe {
                count += 1;
            }
        }
    }
    (count, margin)
}

fn apply_plant(
    plant: PlantKind,
    cfg: &PlatoonConfig,
    vehicle: usize,
    x: State,
    throttle: f64,
    gear: Gear,
) -> Result<(State, bool), SimError> {
    let params = cfg.vehicles[vehicle];
    match plant {
        PlantKind::Nonlinear { substeps } => {
            let (next, _, clamped) =
                integrate_with_trace(&params, &cfg.gears, x, throttle, gear, cfg.dt, substeps);
            Ok((next, clamped))
        }
        PlantKind::PredictionModel => {
            let next = match cfg.model {
                ModelKind::PwaGear => {
                    let pwa = build_pwa_model(&params, &cfg.gears, &cfg.friction)?;
                    step_model1(&pwa, x, throttle, cfg.dt)?.0
                }
                ModelKind::DiscreteGear => step_model2(
                    &params,
                    &cfg.gears,
                    &cfg.friction,
                    x,
                    throttle,
                    gear,
                    cfg.dt,
                )?,
            };
            Ok((next, false))
        }
    }
}

/// Apply one command per vehicle to `plant` for one sample.
pub fn apply_commands(
    plant: PlantKind,
    cfg: &PlatoonConfig,
    states: &[State],
    commands: &[Command],
) -> Result<Vec<State>, SimError> {
    states
        .iter()
        .zip(commands)
        .enumerate()
        .map(|(i, (x, c))| Ok(apply_plant(plant, cfg, i, *x, c.throttle, c.gear)?.0))
        .collect()
}

/// Run one closed loop. Setup problems are errors; a controller that keeps
/// failing ends the run early with the traces recorded so far and the
/// failure in [`RunSummary::error`].
pub fn run_simulation(setup: &RunSetup) -> Result<SimResult, SimError> {
    let started = Instant::now();
    if let PlantKind::Nonlinear { substeps: 0 } = setup.plant {
        return Err(SimError::Setup("plant needs at least one substep".into()));
    }
    let cfg = setup.platoon_config()?;
    let mut x = setup.initial()?;
    let k_sim = setup.task.k_sim;
    let reference = reference_trajectory(
        &setup.task.reference,
        &cfg,
        setup.seed,
        k_sim + cfg.horizon + 1,
    );
    let mut controller =
        Controller::new(setup.controller.clone(), cfg.clone(), setup.solver.clone())
            .map_err(|e| SimError::Setup(e.to_string()))?;
    let m = cfg.m();

    let mut traces = Vec::with_capacity((k_sim + 1) * m);
    let mut steps = Vec::with_capacity(k_sim);
    let mut last_plans: Option<(usize, Vec<crate::mpc::Plan>)> = None;
    let mut failures = 0usize;
    let mut fallback_steps = 0usize;
    let mut error = None;
    let mut iterations = 0usize;

    let mut k = 0;
    while k < k_sim {
        let window = &reference[k..k + cfg.horizon + 1];
        let commands: Vec<(f64, Gear, bool)>;
        let fallback;
        match controller.step(&x, window) {
            Ok(out) => {
                failures = 0;
                fallback = false;
                steps.push(StepRecord {
                    step: k,
                    computation_time: out.computation_time,
                    max_nodes: out.max_nodes(),
                    messages: out.messages,
                    iterations: out.iterations,
                });
                iterations += out.iterations;
                commands = out
                    .commands
                    .iter()
                    .map(|c| (c.throttle, c.gear, c.gear_adjusted))
                    .collect();
                last_plans = Some((k, out.plans));
            }
            Err(e) => {
                failures += 1;
                let replay = last_plans
                    .as_ref()
                    .filter(|_| failures <= setup.max_failures);
                let Some((at, plans)) = replay else {
                    log::warn!("run aborted at step {k}: {e}");
                    error = Some(SimError::Controller { step: k, source: e }.to_string());
                    break;
                };
                fallback = true;
                fallback_steps += 1;
                let offset = k - at;
                commands = plans
                    .iter()
                    .zip(&x)
                    .map(|(p, s)| {
                        let j = offset.min(p.throttles.len() - 1);
                        let requested = p.gears[j];
                        let gear = nearest_valid_gear(&cfg.gears, s.velocity, requested);
                        (p.throttles[j], gear, gear != requested)
                    })
                    .collect();
            }
        }
        let mut next = Vec::with_capacity(m);
        for (i, (&(throttle, gear, adjusted), s)) in commands.iter().zip(&x).enumerate() {
            if adjusted {
                log::debug!("step {k}: vehicle {i} gear moved to {gear}");
            }
            let (xn, traction_clamped) = apply_plant(setup.plant, &cfg, i, *s, throttle, gear)?;
            traces.push(TraceRow {
                step: k,
                vehicle: i,
                position: s.position,
                velocity: s.velocity,
                reference_position: reference[k].position,
                reference_velocity: reference[k].velocity,
                throttle: Some(throttle),
                gear: Some(gear.number()),
                gear_adjusted: adjusted,
                velocity_clamped: cfg.clamp_velocity(s.velocity) != s.velocity,
                traction_clamped,
                fallback,
            });
            next.push(xn);
        }
        x = next;
        k += 1;
    }
    for (i, s) in x.iter().enumerate() {
        traces.push(TraceRow {
            step: k,
            vehicle: i,
            position: s.position,
            velocity: s.velocity,
            reference_position: reference[k].position,
            reference_velocity: reference[k].velocity,
            throttle: None,
            gear: None,
            gear_adjusted: false,
            velocity_clamped: cfg.clamp_velocity(s.velocity) != s.velocity,
            traction_clamped: false,
            fallback: false,
        });
    }

    let times: Vec<f64> = steps.iter().map(|s| s.computation_time).collect();
    let mut result = SimResult {
        summary: RunSummary {
            task: setup.task.id,
            controller: setup.controller.label().to_string(),
            controller_kind: setup.controller.clone(),
            model: cfg.model,
            norm: cfg.norm,
            m,
            horizon: cfg.horizon,
            seed: setup.seed,
            leader: cfg.leader,
            masses: cfg.vehicles.iter().map(|v| v.mass).collect(),
            k_sim,
            steps_completed: k,
            j: 0.0,
            delta_j: None,
            n_no: steps.iter().map(|s| s.max_nodes).max().unwrap_or(0),
            breaches: 0,
            min_gap_margin: f64::INFINITY,
            messages: controller.bus.total_messages(),
            payload: controller.bus.total_payload(),
            iterations,
            fallback_steps,
            error,
        },
        timing: RunTiming {
            t_comp: TimeTriple::from_samples(&times),
            wall_clock: 0.0,
        },
        traces,
        steps,
        config: cfg,
        reference,
    };
    let states = result.states();
    let inputs = result.inputs();
    result.summary.j = tracking_cost(&result.config, &states, &inputs, &result.reference);
    let (breaches, margin) = count_breaches(&states, result.config.d_safe);
    result.summary.breaches = breaches;
    result.summary.min_gap_margin = margin;
    result.timing.wall_clock = started.elapsed().as_secs_f64();
    Ok(result)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub failed: usize,
    pub j_mean: f64,
    pub j_std: f64,
    /// Over runs that have a baseline.
    pub delta_j_mean: Option<f64>,
    pub delta_j_std: Option<f64>,
    /// Pooled over all steps of all runs.
    pub t_comp: Option<TimeTriple>,
    pub n_no: usize,
    pub breaches: usize,
    pub messages: usize,
}

pub fn aggregate(results: &[SimResult]) -> Result<AggregateReport, SimError> {
    if results.is_empty() {
        return Err(SimError::Setup("nothing to aggregate".into()));
    }
    let js: Vec<f64> = results.iter().map(|r| r.summary.j).collect();
    let djs: Vec<f64> = results.iter().filter_map(|r| r.summary.delta_j).collect();
    let times: Vec<f64> = results
        .iter()
        .flat_map(|r| r.steps.iter().map(|s| s.computation_time))
        .collect();
    let (j_mean, j_std) = mean_std(&js).expect("non-empty");
    let dj = mean_std(&djs);
    Ok(AggregateReport {
        runs: results.len(),
        failed: results.iter().filter(|r| !r.completed()).count(),
        j_mean,
        j_std,
        delta_j_mean: dj.map(|d| d.0),
        delta_j_std: dj.map(|d| d.1),
        t_comp: TimeTriple::from_samples(&times),
        n_no: results.iter().map(|r| r.summary.n_no).max().unwrap_or(0),
        breaches: results.iter().map(|r| r.summary.breaches).sum(),
        messages: results.iter().map(|r| r.summary.messages).sum(),
    })
}

/// How the speed-holding condition is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MassBoundReading {
    /// Closed-form maximum of `f_hat / (b_hat u_max - mu g)` over fixed
    /// evaluation points.
    LiteralFormula,
    /// Smallest mass for which every viable velocity admits a holding
    /// throttle under the prediction dynamics with gain `b_hat / m`.
    DynamicsConsistent,
}

/// Inputs of the mass-bound computation.
#[derive(Debug, Clone, PartialEq)]
pub struct MassBoundProblem {
    pub model: ModelKind,
    pub params: VehicleParams,
    pub friction: PwaFriction,
    pub gears: GearTable,
    pub bounds: BoxBounds,
}

impl MassBoundProblem {
    pub fn from_config(cfg: &PlatoonConfig) -> Self {
        Self {
            model: cfg.model,
            params: cfg.vehicles.first().copied().unwrap_or_default(),
            friction: cfg.friction,
            gears: cfg.gears.clone(),
            bounds: cfg.bounds,
        }
    }

    /// `(velocity, traction)` pairs the literal formula is evaluated at.
    pub fn literal_points(&self) -> Result<Vec<(f64, f64)>, SimError> {
        Ok(match self.model {
            ModelKind::PwaGear => build_pwa_model(&self.params, &self.gears, &self.friction)?
                .regions
                .iter()
                .map(|r| (r.v_hi, r.traction))
                .collect(),
            ModelKind::DiscreteGear => {
                let mut pts: Vec<(f64, f64)> = self
                    .gears
                    .iter()
                    .map(|(_, s)| (s.v_high, s.plateau_traction))
                    .collect();
                for v in [self.friction.alpha, self.bounds.v_max] {
                    pts.extend(
                        self.gears
                            .iter()
                            .filter(|(_, s)| s.contains(v))
                            .map(|(_, s)| (v, s.plateau_traction)),
                    );
                }
                pts
            }
        })
    }

    /// Tractions available at `v`: the region's under Model I, every valid
    /// gear's under Model II.
    fn tractions_at(&self, v: f64) -> Result<Vec<f64>, SimError> {
        Ok(match self.model {
            ModelKind::PwaGear => build_pwa_model(&self.params, &self.gears, &self.friction)?
                .regions
                .iter()
                .filter(|r| r.contains_closed(v, 0.0))
                .map(|r| r.traction)
                .collect(),
            ModelKind::DiscreteGear => self
                .gears
                .iter()
                .filter(|(_, s)| s.contains(v))
                .map(|(_, s)| s.plateau_traction)
                .collect(),
        })
    }

    /// A throttle in `[-u_max, u_max]` holds `v` at mass `mass`.
    pub fn holds(&self, mass: f64, v: f64) -> Result<bool, SimError> {
        let force = self.friction.eval(v) + self.params.mu * self.params.g * mass;
        Ok(self
            .tractions_at(v)?
            .iter()
            .any(|b| (force / b).abs() <= self.bounds.u_max))
    }

    /// Grid oracle over `points` velocities spanning the viable range.
    /// Returns the first velocity without a holding throttle.
    pub fn first_failure(&self, mass: f64, points: usize) -> Result<Option<f64>, SimError> {
        let (lo, hi) = (self.bounds.v_min, self.bounds.v_max);
        let points = points.max(2);
        for i in 0..points {
            let v = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            if !self.holds(mass, v)? {
                return Ok(Some(v));
            }
        }
        Ok(None)
    }
}

/// Search range of the bisection, kg.
pub const MASS_SEARCH: (f64, f64) = (1e-3, 1e6);
pub const ORACLE_POINTS: usize = 10_000;

/// The mass bound under `reading`. `None` means no mass satisfies the
/// condition. A condition already met at the bottom of [`MASS_SEARCH`]
/// returns that bottom value.
pub fn feasibility_mass_bound(
    problem: &MassBoundProblem,
    reading: MassBoundReading,
) -> Result<Option<f64>, SimError> {
    match reading {
        MassBoundReading::LiteralFormula => {
            let (mu_g, u_max) = (problem.params.mu * problem.params.g, problem.bounds.u_max);
            let mut worst = f64::NEG_INFINITY;
            for (v, b) in problem.literal_points()? {
                let den = b * u_max - mu_g;
                if den <= 0.0 {
                    return Ok(None);
                }
                worst = worst.max(problem.friction.eval(v) / den);
            }
            Ok(Some(worst))
        }
        MassBoundReading::DynamicsConsistent => {
            let pass = |m: f64| problem.first_failure(m, ORACLE_POINTS).map(|f| f.is_none());
            let (mut lo, mut hi) = MASS_SEARCH;
            if pass(lo)? {
                return Ok(Some(lo));
            }
            if !pass(hi)? {
                return Ok(None);
            }
            while hi - lo > 1e-9 * hi {
                let mid = 0.5 * (lo + hi);
                if pass(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(Some(hi))
        }
    }
}

/// Bisection certificate: the oracle passes at `bound * 1.01` and fails
/// somewhere at `bound * 0.99`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassCertificate {
    pub bound: f64,
    pub passes_above: bool,
    pub fails_below: bool,
}

impl MassCertificate {
    pub fn holds(&self) -> bool {
        self.passes_above && self.fails_below
    }
}

pub fn certify_mass_bound(
    problem: &MassBoundProblem,
    bound: f64,
    points: usize,
) -> Result<MassCertificate, SimError> {
    Ok(MassCertificate {
        bound,
        passes_above: problem.first_failure(bound * 1.01, points)?.is_none(),
        fails_below: problem.first_failure(bound * 0.99, points)?.is_some(),
    })
}

/// Desired gap of each adjacent pair, front pair first.
pub fn desired_gaps(spacing: &SpacingPolicy, states: &[State]) -> Vec<f64> {
    states
        .windows(2)
        .map(|w| spacing_gap(spacing, w[1].velocity))
        .collect()
}
