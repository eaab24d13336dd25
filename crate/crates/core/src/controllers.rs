//! Centralized and distributed hybrid MPC controllers.
//!
//! Every controller maps measured vehicle states and a leader reference window
//! to one `(throttle, gear)` command per vehicle. Distributed schemes exchange
//! trajectories over a [`CommBus`] that only connects vehicles within a fixed
//! number of hops; every exchange is logged.
//!
//! Plans kept in [`ControllerState`] are indexed by vehicle and carry world
//! frame positions.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, MpcError};
use crate::mip::{solve_bnb_with_hint, BnbStatus, SolverOptions};
use crate::models::{nearest_valid_gear, Gear, GearTable, State};
use crate::mpc::{
    build_centralized, build_local, build_problem, rollout_plan, ConsensusTerm, MpcProblem,
    Participant, Plan, PlatoonConfig, ProblemSpec, Solution, Source,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    /// A freshly solved own trajectory.
    Trajectory,
    /// Updated base plans of a neighborhood.
    BasePlans,
    /// Own trajectory and the local copy of the receiver's trajectory.
    SharedTrajectories,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub step: usize,
    pub iteration: usize,
    pub sender: usize,
    pub receiver: usize,
    pub kind: PayloadKind,
    /// Number of scalars carried.
    pub size: usize,
}

/// Simulated vehicle-to-vehicle links between vehicles at most `reach`
/// positions apart.
#[derive(Debug, Clone, PartialEq)]
pub struct CommBus {
    m: usize,
    reach: usize,
    counts: Vec<usize>,
    payload: Vec<usize>,
    log: Vec<Message>,
}

impl CommBus {
    pub fn new(m: usize, reach: usize) -> Self {
        Self {
            m,
            reach,
            counts: vec![0; m * m],
            payload: vec![0; m * m],
            log: Vec::new(),
        }
    }

    pub fn reach(&self) -> usize {
        self.reach
    }

    pub fn send(&mut self, msg: Message) -> Result<(), ControlError> {
        let (s, r) = (msg.sender, msg.receiver);
        if s >= self.m || r >= self.m || s == r || s.abs_diff(r) > self.reach {
            return Err(ControlError::Topology {
                sender: s,
                receiver: r,
            });
        }
        self.counts[s * self.m + r] += 1;
        self.payload[s * self.m + r] += msg.size;
        self.log.push(msg);
        Ok(())
    }

    pub fn total_messages(&self) -> usize {
        self.log.len()
    }

    pub fn total_payload(&self) -> usize {
        self.payload.iter().sum()
    }

    /// Messages sent from `sender` to `receiver`.
    pub fn count(&self, sender: usize, receiver: usize) -> usize {
        self.counts[sender * self.m + receiver]
    }

    pub fn log(&self) -> &[Message] {
        &self.log
    }

    pub fn messages_at_step(&self, step: usize) -> usize {
        self.log.iter().filter(|m| m.step == step).count()
    }

    /// Write the message log as CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for m in &self.log {
            out.serialize(m)?;
        }
        if self.log.is_empty() {
            out.write_record(["step", "iteration", "sender", "receiver", "kind", "size"])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Threshold on the neighborhood cost improvement that triggers an event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum EventThreshold {
    /// `value * (1 + |global cost of the base plans|)`.
    Relative(f64),
    Absolute(f64),
}

impl Default for EventThreshold {
    fn default() -> Self {
        EventThreshold::Relative(1e-3)
    }
}

/// Treatment of the model binaries in ADMM local problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmmBinaries {
    #[default]
    Free,
    /// Fixed to the values of a centralized optimum computed at every step,
    /// which leaves convex local problems.
    CentralizedOptimum,
}

fn default_iterations() -> usize {
    5
}

fn default_rho() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControllerKind {
    Centralized,
    Decentralized,
    Sequential,
    EventBased {
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default)]
        threshold: EventThreshold,
    },
    Admm {
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default)]
        binaries: AdmmBinaries,
    },
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Centralized => "centralized",
            ControllerKind::Decentralized => "decentralized",
            ControllerKind::Sequential => "sequential",
            ControllerKind::EventBased { .. } => "event-based",
            ControllerKind::Admm { .. } => "admm",
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        match *self {
            ControllerKind::EventBased {
                iterations,
                threshold,
            } => {
                if iterations == 0 {
                    return Err(ControlError::Options(
                        "event-based iterations must be at least 1".into(),
                    ));
                }
                let v = match threshold {
                    EventThreshold::Relative(v) | EventThreshold::Absolute(v) => v,
                };
                if v.is_nan() || v < 0.0 {
                    return Err(ControlError::Options(
                        "event threshold must be non-negative".into(),
                    ));
                }
            }
            ControllerKind::Admm {
                iterations, rho, ..
            } => {
                if iterations == 0 {
                    return Err(ControlError::Options(
                        "ADMM iterations must be at least 1".into(),
                    ));
                }
                if !(rho.is_finite() && rho >= 0.0) {
                    return Err(ControlError::Options(
                        "ADMM penalty must be finite and non-negative".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Hops a message may travel.
    pub fn reach(&self) -> usize {
        match self {
            ControllerKind::EventBased { .. } => 2,
            _ => 1,
        }
    }
}

/// Key of an ADMM shared trajectory copy: `(front vehicle of the edge,
/// owner of the trajectory, holder of the copy)`.
pub type DualKey = (usize, usize, usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerState {
    pub step: usize,
    /// Latest plan per vehicle.
    pub plans: Option<Vec<Plan>>,
    /// ADMM multipliers per shared copy, over steps `0..=N`.
    pub duals: BTreeMap<DualKey, Vec<[f64; 2]>>,
    pub total_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub throttle: f64,
    pub gear: Gear,
    /// The planned gear was not valid at the measured velocity and was moved
    /// to the nearest valid one.
    pub gear_adjusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    /// `None` for a platoon-wide problem.
    pub vehicle: Option<usize>,
    pub iteration: usize,
    pub wall_time: f64,
    pub nodes: usize,
    pub status: BnbStatus,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub commands: Vec<Command>,
    pub plans: Vec<Plan>,
    pub stats: Vec<SolveStats>,
    /// Iterations of the coordination loop actually executed.
    pub iterations: usize,
    /// Platoon computation time under the controller's accounting rule.
    pub computation_time: f64,
    pub messages: usize,
    /// ADMM primal residual after each iteration.
    pub residuals: Vec<f64>,
    /// Winning vehicle of each event-based broadcast.
    pub events: Vec<usize>,
}

impl StepOutput {
    pub fn max_nodes(&self) -> usize {
        self.stats.iter().map(|s| s.nodes).max().unwrap_or(0)
    }
}

/// Drop step 0 and extend the tail by one constant-velocity step, repeating
/// the last input. Gears are moved to the nearest valid gear at each state.
pub fn shift_plan(p: &Plan, dt: f64, gears: &GearTable) -> Plan {
    let n = p.horizon();
    let last = *p.states.last().expect("plan has states");
    let mut states: Vec<State> = p.states[1..].to_vec();
    states.push(State::new(
        last.position + dt * last.velocity,
        last.velocity,
    ));
    let mut throttles: Vec<f64> = p.throttles[1.min(n)..].to_vec();
    let mut raw_gears: Vec<Gear> = p.gears[1.min(n)..].to_vec();
    let mut modes: Vec<usize> = p.modes[1.min(n)..].to_vec();
    throttles.push(p.throttles.last().copied().unwrap_or(0.0));
    raw_gears.push(p.gears.last().copied().unwrap_or(Gear::new(1).unwrap()));
    modes.push(p.modes.last().copied().unwrap_or(0));
    let gears_out = raw_gears
        .iter()
        .zip(&states)
        .map(|(&g, s)| nearest_valid_gear(gears, s.velocity, g))
        .collect();
    let mut slacks: Vec<f64> = p.slacks.iter().skip(1).copied().collect();
    if !p.slacks.is_empty() {
        slacks.push(0.0);
    }
    Plan {
        vehicle: p.vehicle,
        states,
        throttles,
        gears: gears_out,
        modes,
        slacks,
        objective: p.objective,
    }
}

/// Constant-velocity extrapolation of a measurement with a gear valid at the
/// measured velocity.
pub fn extrapolate_measurement(cfg: &PlatoonConfig, vehicle: usize, state: State) -> Plan {
    let gear = nearest_valid_gear(&cfg.gears, state.velocity, Gear::new(1).unwrap());
    Plan::extrapolate(vehicle, state, cfg.horizon, cfg.dt, gear)
}

fn check_measurements(
    cfg: &PlatoonConfig,
    states: &[State],
    reference: &[State],
) -> Result<(), ControlError> {
    if states.len() != cfg.m() {
        return Err(ControlError::Measurements {
            expected: cfg.m(),
            got: states.len(),
        });
    }
    if reference.len() < cfg.horizon + 1 {
        return Err(MpcError::ReferenceTooShort {
            need: cfg.horizon + 1,
            got: reference.len(),
        }
        .into());
    }
    Ok(())
}

fn command(cfg: &PlatoonConfig, plan: &Plan, measured: State) -> Command {
    let planned = plan.gears[0];
    let v = cfg.clamp_velocity(measured.velocity);
    let gear = nearest_valid_gear(&cfg.gears, v, planned);
    Command {
        throttle: plan.throttles[0].clamp(-cfg.bounds.u_max, cfg.bounds.u_max),
        gear,
        gear_adjusted: gear != planned,
    }
}

fn commands(cfg: &PlatoonConfig, plans: &[Plan], states: &[State]) -> Vec<Command> {
    plans
        .iter()
        .zip(states)
        .map(|(p, &s)| command(cfg, p, s))
        .collect()
}

/// Branch and bound on an MPC problem, seeded with the binaries of `hint`
/// plans when they can be encoded.
fn solve_problem(
    problem: &MpcProblem,
    solver: &SolverOptions,
    hint: Option<(&[Plan], &[(usize, Vec<State>)])>,
    vehicle: Option<usize>,
    iteration: usize,
) -> Result<(Solution, SolveStats), ControlError> {
    let hint_x = hint.and_then(|(plans, copies)| problem.encode(plans, copies, false).ok());
    let start = Instant::now();
    let res =
        solve_bnb_with_hint(&problem.mip, solver, hint_x.as_deref()).map_err(MpcError::from)?;
    let wall_time = start.elapsed().as_secs_f64();
    let x = res.incumbent.ok_or_else(|| ControlError::Infeasible {
        vehicle,
        status: format!("{:?}", res.status),
    })?;
    if res.status != BnbStatus::Optimal {
        log::warn!(
            "solve for {vehicle:?} stopped early ({:?}); using the incumbent",
            res.status
        );
    }
    let solution = problem.decode(&x)?;
    let stats = SolveStats {
        vehicle,
        iteration,
        wall_time,
        nodes: res.explored_nodes,
        status: res.status,
        objective: res.objective,
    };
    Ok((solution, stats))
}

fn own_plan(sol: &Solution, vehicle: usize) -> Result<Plan, ControlError> {
    sol.plan(vehicle)
        .cloned()
        .ok_or_else(|| MpcError::Missing(format!("plan of vehicle {vehicle}")).into())
}

fn shifted_plans(cfg: &PlatoonConfig, state: &ControllerState) -> Option<Vec<Plan>> {
    state.plans.as_ref().map(|ps| {
        ps.iter()
            .map(|p| shift_plan(p, cfg.dt, &cfg.gears))
            .collect()
    })
}

fn leader_reference<'a>(
    cfg: &PlatoonConfig,
    i: usize,
    reference: &'a [State],
) -> Option<&'a [State]> {
    (i == cfg.leader).then_some(&reference[..=cfg.horizon])
}

fn max_time(stats: &[SolveStats]) -> f64 {
    stats.iter().map(|s| s.wall_time).fold(0.0, f64::max)
}

/// One platoon-wide solve.
pub fn centralized_step(
    cfg: &PlatoonConfig,
    states: &[State],
    reference: &[State],
    solver: &SolverOptions,
    state: &mut ControllerState,
) -> Result<StepOutput, ControlError> {
    check_measurements(cfg, states, reference)?;
    let problem = build_centralized(cfg, states, &reference[..=cfg.horizon])?;
    let hint = shifted_plans(cfg, state);
    let (sol, stats) = solve_problem(
        &problem,
        solver,
        hint.as_deref().map(|h| (h, &[][..])),
        None,
        0,
    )?;
    let plans = sol.plans;
    state.plans = Some(plans.clone());
    state.step += 1;
    state.total_iterations += 1;
    Ok(StepOutput {
        commands: commands(cfg, &plans, states),
        computation_time: stats.wall_time,
        stats: vec![stats],
        plans,
        iterations: 1,
        messages: 0,
        residuals: Vec::new(),
        events: Vec::new(),
    })
}

/// Local problems against constant-velocity extrapolations of the measured
/// neighbors, without communication.
pub fn decentralized_step(
    cfg: &PlatoonConfig,
    states: &[State],
    reference: &[State],
    solver: &SolverOptions,
    state: &mut ControllerState,
) -> Result<StepOutput, ControlError> {
    check_measurements(cfg, states, reference)?;
    let m = cfg.m();
    let assumed: Vec<Plan> = (0..m)
        .map(|i| extrapolate_measurement(cfg, i, states[i]))
        .collect();
    let hints = shifted_plans(cfg, state);
    let results: Vec<Result<(Plan, SolveStats), ControlError>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let front = (i > 0).then(|| assumed[i - 1].states.as_slice());
            let rear = (i + 1 < m).then(|| assumed[i + 1].states.as_slice());
            let problem = build_local(
                cfg,
                i,
                states[i],
                front,
                rear,
                leader_reference(cfg, i, reference),
                Vec::new(),
            )?;
            let hint = hints.as_ref().map(|h| std::slice::from_ref(&h[i]));
            let (sol, stats) =
                solve_problem(&problem, solver, hint.map(|h| (h, &[][..])), Some(i), 0)?;
            Ok((own_plan(&sol, i)?, stats))
        })
        .collect();
    let (plans, stats): (Vec<Plan>, Vec<SolveStats>) = results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    state.plans = Some(plans.clone());
    state.step += 1;
    state.total_iterations += 1;
    Ok(StepOutput {
        commands: commands(cfg, &plans, states),
        computation_time: max_time(&stats),
        stats,
        plans,
        iterations: 1,
        messages: 0,
        residuals: Vec::new(),
        events: Vec::new(),
    })
}

/// Solve order of the sequential scheme: the leader, then both neighbors at
/// distance one, distance two, and so on.
pub fn sequential_ranks(m: usize, leader: usize) -> Vec<Vec<usize>> {
    let mut ranks = vec![vec![leader]];
    for r in 1..m {
        let mut rank = Vec::new();
        if leader >= r {
            rank.push(leader - r);
        }
        if leader + r < m {
            rank.push(leader + r);
        }
        if rank.is_empty() {
            break;
        }
        ranks.push(rank);
    }
    ranks
}

/// Vehicles solve in rank order. Neighbors that already solved in this step
/// supply their fresh trajectories; the others supply their shifted previous
/// plans (measurement extrapolations on the first step).
pub fn sequential_step(
    cfg: &PlatoonConfig,
    states: &[State],
    reference: &[State],
    solver: &SolverOptions,
    state: &mut ControllerState,
    bus: &mut CommBus,
) -> Result<StepOutput, ControlError> {
    check_measurements(cfg, states, reference)?;
    let m = cfg.m();
    let n = cfg.horizon;
    let assumed: Vec<Plan> = match shifted_plans(cfg, state) {
        Some(p) => p,
        None => (0..m)
            .map(|i| extrapolate_measurement(cfg, i, states[i]))
            .collect(),
    };
    let mut fresh: Vec<Option<Plan>> = vec![None; m];
    let mut times = vec![0.0; m];
    let mut all_stats = Vec::new();
    let mut messages = 0;
    for rank in sequential_ranks(m, cfg.leader) {
        let results: Vec<Result<(Plan, SolveStats), ControlError>> = rank
            .par_iter()
            .map(|&i| {
                let traj = |j: usize| fresh[j].as_ref().unwrap_or(&assumed[j]).states.clone();
                let front = (i > 0).then(|| traj(i - 1));
                let rear = (i + 1 < m).then(|| traj(i + 1));
                let problem = build_local(
                    cfg,
                    i,
                    states[i],
                    front.as_deref(),
                    rear.as_deref(),
                    leader_reference(cfg, i, reference),
                    Vec::new(),
                )?;
                let hint = std::slice::from_ref(&assumed[i]);
                let (sol, stats) =
                    solve_problem(&problem, solver, Some((hint, &[][..])), Some(i), 0)?;
                Ok((own_plan(&sol, i)?, stats))
            })
            .collect();
        for (&i, r) in rank.iter().zip(results) {
            let (plan, stats) = r?;
            times[i] = stats.wall_time;
            all_stats.push(stats);
            fresh[i] = Some(plan);
            for j in [i.wrapping_sub(1), i + 1] {
                if j < m {
                    bus.send(Message {
                        step: state.step,
                        iteration: 0,
                        sender: i,
                        receiver: j,
                        kind: PayloadKind::Trajectory,
                        size: 2 * (n + 1),
                    })?;
                    messages += 1;
                }
            }
        }
    }
    let l = cfg.leader;
    let front_chain: f64 = times[..=l].iter().sum();
    let rear_chain: f64 = times[l..].iter().sum();
    let plans: Vec<Plan> = fresh
        .into_iter()
        .map(|p| p.expect("every vehicle solved"))
        .collect();
    state.plans = Some(plans.clone());
    state.step += 1;
    state.total_iterations += 1;
    Ok(StepOutput {
        commands: commands(cfg, &plans, states),
        computation_time: front_chain.max(rear_chain),
        stats: all_stats,
        plans,
        iterations: 1,
        messages,
        residuals: Vec::new(),
        events: Vec::new(),
    })
}

/// Re-simulate a plan's inputs from the measured state so that a base plan
/// starts where the vehicle actually is.
fn rebase(cfg: &PlatoonConfig, plan: &Plan, measured: State) -> Result<Plan, ControlError> {
    Ok(rollout_plan(
        cfg,
        plan.vehicle,
        measured,
        &plan.throttles,
        &plan.gears,
    )?)
}

/// Enlarged problem of vehicle `i`: itself and its neighbors decide, the
/// vehicles two positions away are fixed to their base plans.
fn neighborhood_problem(
    cfg: &PlatoonConfig,
    i: usize,
    states: &[State],
    reference: &[State],
    base: &[Plan],
) -> Result<(MpcProblem, Vec<usize>), ControlError> {
    let m = cfg.m();
    let lo = i.saturating_sub(1);
    let hi = (i + 1).min(m - 1);
    let members: Vec<usize> = (lo..=hi).collect();
    let mut participants: Vec<Participant> = members
        .iter()
        .map(|&j| Participant {
            vehicle: j,
            initial: states[j],
            source: Source::Decision,
        })
        .collect();
    for j in [lo.checked_sub(1), (hi + 1 < m).then_some(hi + 1)]
        .into_iter()
        .flatten()
    {
        participants.push(Participant {
            vehicle: j,
            initial: states[j],
            source: Source::Fixed(base[j].states.clone()),
        });
    }
    let leader_in = members.contains(&cfg.leader);
    let spec = ProblemSpec::new(
        participants,
        leader_in.then(|| reference[..=cfg.horizon].to_vec()),
    );
    Ok((build_problem(cfg, spec)?, members))
}

/// Iterated neighborhood improvements. In every iteration each vehicle solves
/// its enlarged problem against the base plans; the largest improvement above
/// the threshold replaces the base plans of that neighborhood.
pub fn event_based_step(
    cfg: &PlatoonConfig,
    states: &[State],
    reference: &[State],
    solver: &SolverOptions,
    state: &mut ControllerState,
    bus: &mut CommBus,
    iterations: usize,
    threshold: EventThreshold,
) -> Result<StepOutput, ControlError> {
    check_measurements(cfg, states, reference)?;
    let m = cfg.m();
    let n = cfg.horizon;
    let mut all_stats = Vec::new();
    let mut computation_time = 0.0;
    let mut base: Vec<Plan> = match shifted_plans(cfg, state) {
        Some(shifted) => shifted
            .iter()
            .zip(states)
            .map(|(p, &s)| rebase(cfg, p, s))
            .collect::<Result<_, _>>()?,
        None => {
            let mut boot = ControllerState::default();
            let out = decentralized_step(cfg, states, reference, solver, &mut boot)?;
            computation_time += out.computation_time;
            all_stats.extend(out.stats);
            out.plans
        }
    };
    let mut events = Vec::new();
    let mut used = 0;
    let mut messages = 0;
    for it in 0..iterations {
        used += 1;
        let global = build_centralized(cfg, states, &reference[..=n])?.evaluate(&base, &[])?;
        let limit = match threshold {
            EventThreshold::Relative(r) => r * (1.0 + global.abs()),
            EventThreshold::Absolute(a) => a,
        };
        let results: Vec<Result<(f64, Vec<usize>, Solution, SolveStats), ControlError>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let (problem, members) = neighborhood_problem(cfg, i, states, reference, &base)?;
                let base_cost = problem.evaluate(&base, &[])?;
                let (sol, stats) =
                    solve_problem(&problem, solver, Some((&base, &[][..])), Some(i), it)?;
                Ok((base_cost - sol.objective, members, sol, stats))
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        computation_time += results.iter().map(|r| r.3.wall_time).fold(0.0, f64::max);
        let mut winner: Option<usize> = None;
        for (i, r) in results.iter().enumerate() {
            if winner.map_or(true, |w| r.0 > results[w].0) {
                winner = Some(i);
            }
        }
        all_stats.extend(results.iter().map(|r| r.3.clone()));
        let Some(w) = winner.filter(|&w| results[w].0 >= limit) else {
            break;
        };
        let (_, members, sol, _) = &results[w];
        for &j in members {
            base[j] = own_plan(sol, j)?;
        }
        events.push(w);
        for j in w.saturating_sub(2)..=(w + 2).min(m - 1) {
            if j != w {
                bus.send(Message {
                    step: state.step,
                    iteration: it,
                    sender: w,
                    receiver: j,
                    kind: PayloadKind::BasePlans,
                    size: members.len() * (2 * (n + 1) + 2 * n),
                })?;
                messages += 1;
            }
        }
    }
    state.plans = Some(base.clone());
    state.step += 1;
    state.total_iterations += used;
    Ok(StepOutput {
        commands: commands(cfg, &base, states),
        stats: all_stats,
        plans: base,
        iterations: used,
        computation_time,
        messages,
        residuals: Vec::new(),
        events,
    })
}

/// Shared copies of an ADMM local problem: `(key, owner)` per copy the holder
/// keeps, own trajectory included.
fn admm_keys(m: usize, holder: usize) -> Vec<DualKey> {
    let mut keys = Vec::new();
    if holder > 0 {
        let e = holder - 1;
        keys.push((e, e, holder));
        keys.push((e, holder, holder));
    }
    if holder + 1 < m {
        let e = holder;
        keys.push((e, holder, holder));
        keys.push((e, holder + 1, holder));
    }
    keys
}

fn shift_duals(duals: &mut BTreeMap<DualKey, Vec<[f64; 2]>>) {
    for lam in duals.values_mut() {
        if !lam.is_empty() {
            lam.remove(0);
            let last = *lam.last().unwrap_or(&[0.0, 0.0]);
            lam.push(last);
        }
    }
}

/// Consensus ADMM on the state trajectories shared by adjacent vehicles.
/// Each vehicle keeps a copy of each neighbor's trajectory; pair and safety
/// terms are split evenly between the two local problems of a pair.
#[allow(clippy::too_many_arguments)]
pub fn admm_step(
    cfg: &PlatoonConfig,
    states: &[State],
    reference: &[State],
    solver: &SolverOptions,
    state: &mut ControllerState,
    bus: &mut CommBus,
    iterations: usize,
    rho: f64,
    binaries: AdmmBinaries,
) -> Result<StepOutput, ControlError> {
    check_measurements(cfg, states, reference)?;
    let m = cfg.m();
    let n = cfg.horizon;
    let initial: Vec<Plan> = match shifted_plans(cfg, state) {
        Some(p) => p,
        None => (0..m)
            .map(|i| extrapolate_measurement(cfg, i, states[i]))
            .collect(),
    };
    let fixed_bins: Option<Vec<Vec<Vec<f64>>>> = match binaries {
        AdmmBinaries::Free => None,
        AdmmBinaries::CentralizedOptimum => {
            let problem = build_centralized(cfg, states, &reference[..=n])?;
            let hint = Some((initial.as_slice(), &[][..]));
            let (sol, _) = solve_problem(&problem, solver, hint, None, 0)?;
            let x = problem.encode(&sol.plans, &[], true)?;
            Some(
                (0..m)
                    .map(|i| problem.binary_values(&x, i).expect("decision vehicle"))
                    .collect(),
            )
        }
    };
    // consensus per (edge, owner); trajectories start at the measured state
    let mut z: BTreeMap<(usize, usize), Vec<State>> = BTreeMap::new();
    for e in 0..m.saturating_sub(1) {
        for o in [e, e + 1] {
            let mut traj = initial[o].states.clone();
            traj[0] = states[o];
            z.insert((e, o), traj);
        }
    }
    if state.duals.is_empty() {
        for h in 0..m {
            for key in admm_keys(m, h) {
                state.duals.insert(key, vec![[0.0, 0.0]; n + 1]);
            }
        }
    } else {
        shift_duals(&mut state.duals);
    }

    let mut plans: Vec<Plan> = initial.clone();
    let mut all_stats = Vec::new();
    let mut residuals = Vec::new();
    let mut computation_time = 0.0;
    let mut messages = 0;
    for it in 0..iterations {
        let results: Vec<Result<(Solution, SolveStats), ControlError>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut participants = vec![Participant {
                    vehicle: i,
                    initial: states[i],
                    source: Source::Decision,
                }];
                let mut consensus = Vec::new();
                for key @ (e, o, _) in admm_keys(m, i) {
                    let target = z[&(e, o)].clone();
                    let lambda = state.duals[&key].clone();
                    if o != i {
                        let source = if rho > 0.0 {
                            Source::Copy
                        } else {
                            Source::Fixed(target.clone())
                        };
                        participants.push(Participant {
                            vehicle: o,
                            initial: states[o],
                            source,
                        });
                        if rho == 0.0 {
                            continue;
                        }
                    }
                    consensus.push(ConsensusTerm {
                        vehicle: o,
                        lambda,
                        target,
                        rho,
                    });
                }
                let mut spec = ProblemSpec::new(
                    participants,
                    leader_reference(cfg, i, reference).map(<[State]>::to_vec),
                );
                spec.pair_scale = 0.5;
                spec.slack_scale = 0.5;
                spec.consensus = consensus;
                let mut problem = build_problem(cfg, spec)?;
                if let Some(fb) = &fixed_bins {
                    problem.fix_binaries(i, &fb[i])?;
                }
                let copies: Vec<(usize, Vec<State>)> = problem
                    .copies
                    .iter()
                    .map(|c| (c.vehicle, plans[c.vehicle].states.clone()))
                    .collect();
                let hint = Some((std::slice::from_ref(&plans[i]), copies.as_slice()));
                solve_problem(&problem, solver, hint, Some(i), it)
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        computation_time += results.iter().map(|r| r.1.wall_time).fold(0.0, f64::max);

        // held[(e, o, h)]: holder h's version of owner o's trajectory on edge e
        let mut held: BTreeMap<DualKey, Vec<State>> = BTreeMap::new();
        for (i, (sol, stats)) in results.iter().enumerate() {
            plans[i] = own_plan(sol, i)?;
            all_stats.push(stats.clone());
            for key @ (_, o, _) in admm_keys(m, i) {
                let traj = if o == i {
                    plans[i].states.clone()
                } else if rho > 0.0 {
                    sol.copies
                        .iter()
                        .find(|c| c.0 == o)
                        .map(|c| c.1.clone())
                        .ok_or_else(|| MpcError::Missing(format!("copy of vehicle {o}")))?
                } else {
                    z[&(key.0, o)].clone()
                };
                held.insert(key, traj);
            }
        }
        for e in 0..m.saturating_sub(1) {
            for (s, r) in [(e, e + 1), (e + 1, e)] {
                bus.send(Message {
                    step: state.step,
                    iteration: it,
                    sender: s,
                    receiver: r,
                    kind: PayloadKind::SharedTrajectories,
                    size: 4 * (n + 1),
                })?;
                messages += 1;
            }
        }
        let mut residual: f64 = 0.0;
        for ((e, o), zt) in z.iter_mut() {
            let a = &held[&(*e, *o, *e)];
            let b = &held[&(*e, *o, *e + 1)];
            for k in 0..=n {
                zt[k] = State::new(
                    0.5 * (a[k].position + b[k].position),
                    0.5 * (a[k].velocity + b[k].velocity),
                );
            }
        }
        for (key @ (e, o, _), traj) in &held {
            let zt = &z[&(*e, *o)];
            let lam = state.duals.get_mut(key).expect("dual exists");
            for k in 0..=n {
                let d = [
                    traj[k].position - zt[k].position,
                    traj[k].velocity - zt[k].velocity,
                ];
                residual = residual.max(d[0].abs()).max(d[1].abs());
                lam[k][0] += rho * d[0];
                lam[k][1] += rho * d[1];
            }
        }
        residuals.push(residual);
        log::debug!("admm iteration {it}: primal residual {residual:.3e}");
    }
    state.plans = Some(plans.clone());
    state.step += 1;
    state.total_iterations += iterations;
    Ok(StepOutput {
        commands: commands(cfg, &plans, states),
        stats: all_stats,
        plans,
        iterations,
        computation_time,
        messages,
        residuals,
        events: Vec::new(),
    })
}

/// A controller with its persistent state and communication bus.
#[derive(Debug, Clone)]
pub struct Controller {
    pub kind: ControllerKind,
    pub config: PlatoonConfig,
    pub solver: SolverOptions,
    pub state: ControllerState,
    pub bus: CommBus,
}

impl Controller {
    pub fn new(
        kind: ControllerKind,
        config: PlatoonConfig,
        solver: SolverOptions,
    ) -> Result<Self, ControlError> {
        kind.validate()?;
        config.validate()?;
        solver.validate().map_err(ControlError::Options)?;
        let bus = CommBus::new(config.m(), kind.reach());
        Ok(Self {
            kind,
            config,
            solver,
            state: ControllerState::default(),
            bus,
        })
    }

    /// One receding-horizon step. `reference` covers at least `N + 1` steps
    /// starting at the current one.
    pub fn step(
        &mut self,
        states: &[State],
        reference: &[State],
    ) -> Result<StepOutput, ControlError> {
        let (cfg, solver, st, bus) = (&self.config, &self.solver, &mut self.state, &mut self.bus);
        match self.kind {
            ControllerKind::Centralized => centralized_step(cfg, states, reference, solver, st),
            ControllerKind::Decentralized => decentralized_step(cfg, states, reference, solver, st),
            ControllerKind::Sequential => sequential_step(cfg, states, reference, solver, st, bus),
            ControllerKind::EventBased {
                iterations,
                threshold,
            } => event_based_step(
                cfg, states, reference, solver, st, bus, iterations, threshold,
            ),
            ControllerKind::Admm {
                iterations,
                rho,
                binaries,
            } => admm_step(
                cfg, states, reference, solver, st, bus, iterations, rho, binaries,
            ),
        }
    }
}
