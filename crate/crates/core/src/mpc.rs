//! Platoon MPC problems as mixed-integer programs.
//!
//! Every problem is assembled by [`build_problem`] from a list of
//! participating vehicles. Each participant is either a decision vehicle
//! (states, inputs and model binaries as variables), a copy (free state
//! trajectory without dynamics, used by consensus schemes) or a fixed
//! trajectory. Pair terms and safety rows are emitted for every adjacent pair
//! that is present and not entirely fixed.
//!
//! Positions inside a problem live in a shifted frame so that the position box
//! of the MLD conversion is never binding; decoded plans are in world frame.

use serde::{Deserialize, Serialize};

use crate::error::{MldError, ModelError, MpcError};
use crate::mip::MixedIntegerProgram;
use crate::mld::{
    build_mld_model1, build_mld_model2, BinaryLabel, BoxBounds, MldSystem, ModelKind, RowKind,
};
use crate::models::{
    build_pwa_model, euler_with_traction, nearest_valid_gear, Gear, GearTable, PwaFriction, State,
    VehicleParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpacingPolicy {
    ConstantDistance { d0: f64 },
    VelocityDependent { d0: f64, t0: f64 },
}

impl SpacingPolicy {
    /// `(d0, t0)` of the affine gap law.
    pub fn coefficients(&self) -> (f64, f64) {
        match *self {
            SpacingPolicy::ConstantDistance { d0 } => (d0, 0.0),
            SpacingPolicy::VelocityDependent { d0, t0 } => (d0, t0),
        }
    }
}

/// Desired headway for a follower moving at `follower_velocity`.
pub fn spacing_gap(p: &SpacingPolicy, follower_velocity: f64) -> f64 {
    let (d0, t0) = p.coefficients();
    d0 + t0 * follower_velocity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonConfig {
    /// Vehicle parameters, front vehicle first. The platoon size is its length.
    pub vehicles: Vec<VehicleParams>,
    pub horizon: usize,
    /// Zero-based leader index.
    pub leader: usize,
    pub model: ModelKind,
    pub norm: NormKind,
    pub q_x: [[f64; 2]; 2],
    pub q_u: f64,
    pub spacing: SpacingPolicy,
    pub slack_weight: f64,
    pub d_safe: f64,
    pub bounds: BoxBounds,
    pub a_min: f64,
    pub a_max: f64,
    pub dt: f64,
    pub gears: GearTable,
    pub friction: PwaFriction,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        let bounds = BoxBounds::default();
        let vehicle = VehicleParams::default();
        Self {
            vehicles: vec![vehicle; 3],
            horizon: 5,
            leader: 0,
            model: ModelKind::PwaGear,
            norm: NormKind::One,
            q_x: [[1.0, 0.0], [0.0, 0.1]],
            q_u: 1.0,
            spacing: SpacingPolicy::ConstantDistance { d0: 50.0 },
            slack_weight: 1e4,
            d_safe: 25.0,
            bounds,
            a_min: -2.0,
            a_max: 2.5,
            dt: 1.0,
            gears: GearTable::default(),
            friction: PwaFriction::from_anchors(vehicle.c, bounds.v_max),
        }
    }
}

impl PlatoonConfig {
    pub fn m(&self) -> usize {
        self.vehicles.len()
    }

    pub fn with_size(mut self, m: usize) -> Self {
        let v = self.vehicles.first().copied().unwrap_or_default();
        self.vehicles = vec![v; m];
        self
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |s: &str| Err(MpcError::Config(s.to_string()));
        if self.vehicles.is_empty() {
            return bad("platoon must contain at least one vehicle");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.leader >= self.m() {
            return bad("leader index outside the platoon");
        }
        if !(self.dt > 0.0) {
            return bad("sampling time must be positive");
        }
        if !(self.slack_weight > 0.0) {
            return bad("slack weight must be positive");
        }
        if !(self.d_safe > 0.0) {
            return bad("safe distance must be positive");
        }
        if !(self.q_u >= 0.0) {
            return bad("input weight must be nonnegative");
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return bad("acceleration bounds must straddle zero");
        }
        match self.spacing {
            SpacingPolicy::ConstantDistance { d0 } if d0 < self.d_safe => {
                return bad("constant spacing below the safe distance");
            }
            SpacingPolicy::VelocityDependent { d0, t0 } if d0 < 0.0 || t0 < 0.0 => {
                return bad("spacing coefficients must be nonnegative");
            }
            _ => {}
        }
        q_decomposition(&self.q_x)?;
        self.bounds.validate()?;
        for v in &self.vehicles {
            v.validate()?;
        }
        self.gears.validate()?;
        self.friction.validate()?;
        Ok(())
    }

    /// The MLD model of one vehicle.
    pub fn mld_system(&self, vehicle: usize) -> Result<MldSystem, MpcError> {
        let params = &self.vehicles[vehicle];
        Ok(match self.model {
            ModelKind::PwaGear => {
                let pwa = build_pwa_model(params, &self.gears, &self.friction)?;
                build_mld_model1(&pwa, &self.bounds, self.dt)?
            }
            ModelKind::DiscreteGear => {
                build_mld_model2(params, &self.gears, &self.friction, &self.bounds, self.dt)?
            }
        })
    }

    /// Velocity clamped into the prediction box.
    pub fn clamp_velocity(&self, v: f64) -> f64 {
        v.clamp(self.bounds.v_min, self.bounds.v_max)
    }
}

/// `e^T Q e = w1 (e1 + r e2)^2 + w2 e2^2` for symmetric PSD `Q`.
fn q_decomposition(q: &[[f64; 2]; 2]) -> Result<(f64, f64, f64), MpcError> {
    let a = q[0][0];
    let b = 0.5 * (q[0][1] + q[1][0]);
    let c = q[1][1];
    let tol = 1e-12 * (a.abs() + c.abs()).max(1.0);
    if a < -tol || c < -tol || a * c - b * b < -tol {
        return Err(MpcError::IndefiniteWeight);
    }
    if a <= tol {
        if b.abs() > tol {
            return Err(MpcError::IndefiniteWeight);
        }
        return Ok((0.0, 0.0, c.max(0.0)));
    }
    Ok((a, b / a, (c - b * b / a).max(0.0)))
}

/// Weighted norm of a two-component error.
pub fn weighted_norm(kind: NormKind, q: &[[f64; 2]; 2], e: [f64; 2]) -> f64 {
    match kind {
        NormKind::One => {
            (q[0][0] * e[0] + q[0][1] * e[1]).abs() + (q[1][0] * e[0] + q[1][1] * e[1]).abs()
        }
        NormKind::Two => {
            e[0] * (q[0][0] * e[0] + q[0][1] * e[1]) + e[1] * (q[1][0] * e[0] + q[1][1] * e[1])
        }
    }
}

/// Weighted norm of a scalar input.
pub fn input_norm(kind: NormKind, q_u: f64, u: f64) -> f64 {
    match kind {
        NormKind::One => (q_u * u).abs(),
        NormKind::Two => q_u * u * u,
    }
}

/// Leader tracking error.
pub fn tracking_error(x: State, r: State) -> [f64; 2] {
    [x.position - r.position, x.velocity - r.velocity]
}

/// Spacing error of the pair `(front, rear)`; zero in perfect formation.
pub fn spacing_error(policy: &SpacingPolicy, front: State, rear: State) -> [f64; 2] {
    [
        front.position - rear.position - spacing_gap(policy, rear.velocity),
        front.velocity - rear.velocity,
    ]
}

/// Affine expression over program variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(j: usize) -> Self {
        Self {
            terms: vec![(j, 1.0)],
            constant: 0.0,
        }
    }

    pub fn plus(mut self, other: &LinExpr, scale: f64) -> Self {
        self.terms
            .extend(other.terms.iter().map(|&(j, a)| (j, a * scale)));
        self.constant += other.constant * scale;
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        LinExpr::default().plus(self, s)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(j, a)| a * x[j]).sum::<f64>()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.1 == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum DerivedKind {
    Identity,
    Abs,
    PositivePart,
}

/// An auxiliary whose optimal value is a function of other variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Derived {
    var: usize,
    kind: DerivedKind,
    expr: LinExpr,
}

/// Add the weighted norm of a two-component error to the objective, scaled by
/// `scale`. The 1-norm uses epigraph auxiliaries; the 2-norm adds quadratic
/// terms. Returns the epigraph variables created.
pub fn encode_norm(
    mip: &mut MixedIntegerProgram,
    kind: NormKind,
    q: &[[f64; 2]; 2],
    e: &[LinExpr; 2],
    scale: f64,
) -> Result<Vec<usize>, MpcError> {
    let mut derived = Vec::new();
    encode_norm_inner(mip, kind, q, e, scale, &mut derived)?;
    Ok(derived.iter().map(|d| d.var).collect())
}

fn encode_norm_inner(
    mip: &mut MixedIntegerProgram,
    kind: NormKind,
    q: &[[f64; 2]; 2],
    e: &[LinExpr; 2],
    scale: f64,
    derived: &mut Vec<Derived>,
) -> Result<(), MpcError> {
    match kind {
        NormKind::One => {
            for row in q {
                let expr = e[0].scaled(row[0]).plus(&e[1], row[1]);
                add_abs(mip, expr, scale, derived);
            }
        }
        NormKind::Two => {
            let (w1, r, w2) = q_decomposition(q)?;
            add_square(mip, &e[0].clone().plus(&e[1], r), w1 * scale, derived);
            add_square(mip, &e[1], w2 * scale, derived);
        }
    }
    Ok(())
}

/// Scalar version of [`encode_norm`] with weight `q`.
pub fn encode_norm_scalar(
    mip: &mut MixedIntegerProgram,
    kind: NormKind,
    q: f64,
    e: &LinExpr,
    scale: f64,
) -> Result<Vec<usize>, MpcError> {
    if q < 0.0 {
        return Err(MpcError::IndefiniteWeight);
    }
    let mut derived = Vec::new();
    encode_scalar_inner(mip, kind, q, e, scale, &mut derived)?;
    Ok(derived.iter().map(|d| d.var).collect())
}

fn encode_scalar_inner(
    mip: &mut MixedIntegerProgram,
    kind: NormKind,
    q: f64,
    e: &LinExpr,
    scale: f64,
    derived: &mut Vec<Derived>,
) -> Result<(), MpcError> {
    if q < 0.0 {
        return Err(MpcError::IndefiniteWeight);
    }
    match kind {
        NormKind::One => add_abs(mip, e.scaled(q), scale, derived),
        NormKind::Two => add_square(mip, e, q * scale, derived),
    }
    Ok(())
}

fn add_abs(mip: &mut MixedIntegerProgram, expr: LinExpr, scale: f64, derived: &mut Vec<Derived>) {
    if scale == 0.0 {
        return;
    }
    if expr.is_constant() {
        mip.offset += scale * expr.constant.abs();
        return;
    }
    let t = mip.add_var(0.0, f64::INFINITY, scale, format!("t{}", mip.n()));
    let mut up: Vec<(usize, f64)> = expr.terms.clone();
    up.push((t, -1.0));
    mip.add_le(up, -expr.constant);
    let mut down: Vec<(usize, f64)> = expr.terms.iter().map(|&(j, a)| (j, -a)).collect();
    down.push((t, -1.0));
    mip.add_le(down, expr.constant);
    derived.push(Derived {
        var: t,
        kind: DerivedKind::Abs,
        expr,
    });
}

/// `weight * expr^2`. Non-trivial expressions get their own error variable so
/// the quadratic stays small when positions are large.
fn add_square(
    mip: &mut MixedIntegerProgram,
    expr: &LinExpr,
    weight: f64,
    derived: &mut Vec<Derived>,
) {
    if weight == 0.0 {
        return;
    }
    if expr.is_constant() {
        mip.offset += weight * expr.constant * expr.constant;
        return;
    }
    if expr.terms.len() == 1 && expr.constant == 0.0 {
        mip.add_square(&expr.terms, 0.0, weight);
        return;
    }
    let y = mip.add_var(
        f64::NEG_INFINITY,
        f64::INFINITY,
        0.0,
        format!("e{}", mip.n()),
    );
    let mut row: Vec<(usize, f64)> = expr.terms.iter().map(|&(j, a)| (j, -a)).collect();
    row.push((y, 1.0));
    mip.add_eq(row, expr.constant);
    mip.add_square(&[(y, 1.0)], 0.0, weight);
    derived.push(Derived {
        var: y,
        kind: DerivedKind::Identity,
        expr: expr.clone(),
    });
}

/// How a participant's trajectory enters a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Source {
    /// States, inputs and model binaries are decision variables.
    Decision,
    /// A free state trajectory without dynamics.
    Copy,
    /// A known trajectory over steps `0..=N` (world frame).
    Fixed(Vec<State>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub vehicle: usize,
    /// Measured state at step 0 (ignored for fixed trajectories).
    pub initial: State,
    pub source: Source,
}

/// Linear and quadratic pull of one state trajectory towards a target:
/// `sum_k lambda_k^T (x_k - target_k) + rho/2 |x_k - target_k|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusTerm {
    pub vehicle: usize,
    pub lambda: Vec<[f64; 2]>,
    pub target: Vec<State>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub participants: Vec<Participant>,
    /// Reference over steps `0..=N`. Required, and tracked, only when the
    /// leader is a decision participant.
    pub reference: Option<Vec<State>>,
    /// Multiplier on pair cost terms.
    pub pair_scale: f64,
    /// Multiplier on slack penalties.
    pub slack_scale: f64,
    pub consensus: Vec<ConsensusTerm>,
}

impl ProblemSpec {
    pub fn new(participants: Vec<Participant>, reference: Option<Vec<State>>) -> Self {
        Self {
            participants,
            reference,
            pair_scale: 1.0,
            slack_scale: 1.0,
            consensus: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleVars {
    pub vehicle: usize,
    pub pos: Vec<usize>,
    pub vel: Vec<usize>,
    pub u: Vec<usize>,
    pub bin: Vec<Vec<usize>>,
    pub aux: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyVars {
    pub vehicle: usize,
    pub pos: Vec<usize>,
    pub vel: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackVar {
    pub front: usize,
    pub rear: usize,
    pub step: usize,
    pub var: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Slot {
    Vars { pos: Vec<usize>, vel: Vec<usize> },
    Fixed(Vec<State>),
}

/// An MPC optimization problem with its variable map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcProblem {
    pub mip: MixedIntegerProgram,
    pub config: PlatoonConfig,
    pub spec: ProblemSpec,
    /// World position plus this offset gives the problem-frame position.
    pub frame_offset: f64,
    pub vehicles: Vec<VehicleVars>,
    pub copies: Vec<CopyVars>,
    pub slacks: Vec<SlackVar>,
    pub systems: Vec<MldSystem>,
    derived: Vec<Derived>,
}

/// A decoded predicted trajectory of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub vehicle: usize,
    /// States over steps `0..=N` (world frame).
    pub states: Vec<State>,
    /// Throttles over steps `0..N`.
    pub throttles: Vec<f64>,
    /// Gears over steps `0..N`.
    pub gears: Vec<Gear>,
    /// Active Model I region (Model II: friction piece) per step.
    pub modes: Vec<usize>,
    /// Safety slacks of the pair with the preceding vehicle over steps `1..=N`.
    pub slacks: Vec<f64>,
    /// Objective of the problem the plan came from.
    pub objective: f64,
}

impl Plan {
    pub fn horizon(&self) -> usize {
        self.throttles.len()
    }

    /// Constant-velocity plan from a measured state, with the given gear.
    pub fn extrapolate(vehicle: usize, state: State, horizon: usize, dt: f64, gear: Gear) -> Plan {
        Plan {
            vehicle,
            states: (0..=horizon)
                .map(|k| {
                    State::new(
                        state.position + k as f64 * dt * state.velocity,
                        state.velocity,
                    )
                })
                .collect(),
            throttles: vec![0.0; horizon],
            gears: vec![gear; horizon],
            modes: vec![0; horizon],
            slacks: Vec::new(),
            objective: f64::NAN,
        }
    }
}

/// A decoded problem solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub plans: Vec<Plan>,
    pub copies: Vec<(usize, Vec<State>)>,
    pub slacks: Vec<(SlackVar, f64)>,
    pub objective: f64,
}

impl Solution {
    pub fn plan(&self, vehicle: usize) -> Option<&Plan> {
        self.plans.iter().find(|p| p.vehicle == vehicle)
    }

    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().map(|s| s.1).fold(0.0, f64::max)
    }
}

/// Assemble a problem from participants.
pub fn build_problem(cfg: &PlatoonConfig, spec: ProblemSpec) -> Result<MpcProblem, MpcError> {
    cfg.validate()?;
    let n = cfg.horizon;
    let m = cfg.m();
    let mut seen = vec![false; m];
    for p in &spec.participants {
        if p.vehicle >= m {
            return Err(MpcError::Config(format!(
                "vehicle {} outside platoon of {m}",
                p.vehicle
            )));
        }
        if std::mem::replace(&mut seen[p.vehicle], true) {
            return Err(MpcError::Config(format!(
                "vehicle {} listed twice",
                p.vehicle
            )));
        }
        if let Source::Fixed(traj) = &p.source {
            if traj.len() < n + 1 {
                return Err(MpcError::ReferenceTooShort {
                    need: n + 1,
                    got: traj.len(),
                });
            }
        }
        if !p.initial.is_finite() {
            return Err(MpcError::Config(format!(
                "non-finite state for vehicle {}",
                p.vehicle
            )));
        }
    }
    let leader_active = spec
        .participants
        .iter()
        .any(|p| p.vehicle == cfg.leader && p.source == Source::Decision);
    let reference = if leader_active {
        let r = spec
            .reference
            .as_ref()
            .ok_or_else(|| MpcError::Missing("reference trajectory for the leader".into()))?;
        if r.len() < n + 1 {
            return Err(MpcError::ReferenceTooShort {
                need: n + 1,
                got: r.len(),
            });
        }
        Some(r.clone())
    } else {
        None
    };

    let b = &cfg.bounds;
    let anchor: Vec<f64> = spec
        .participants
        .iter()
        .map(|p| match &p.source {
            Source::Fixed(t) => t[0].position,
            _ => p.initial.position,
        })
        .collect();
    let mean = if anchor.is_empty() {
        0.0
    } else {
        anchor.iter().sum::<f64>() / anchor.len() as f64
    };
    let offset = b.p_min + 0.5 * (b.p_max - b.p_min) - mean;

    let mut mip = MixedIntegerProgram::new();
    let mut derived = Vec::new();
    let mut slots: Vec<Option<Slot>> = vec![None; m];
    let mut vehicles = Vec::new();
    let mut copies = Vec::new();
    let mut systems = Vec::new();

    let mut participants = spec.participants.clone();
    participants.sort_by_key(|p| p.vehicle);
    for p in &participants {
        let i = p.vehicle;
        let v0 = cfg.clamp_velocity(p.initial.velocity);
        let x0 = p.initial.position + offset;
        match &p.source {
            Source::Fixed(traj) => {
                slots[i] = Some(Slot::Fixed(
                    traj[..=n]
                        .iter()
                        .map(|s| State::new(s.position + offset, s.velocity))
                        .collect(),
                ));
            }
            Source::Copy => {
                let mut pos = Vec::with_capacity(n + 1);
                let mut vel = Vec::with_capacity(n + 1);
                for k in 0..=n {
                    let (plo, phi, vlo, vhi) = if k == 0 {
                        (x0, x0, v0, v0)
                    } else {
                        (b.p_min, b.p_max, b.v_min, b.v_max)
                    };
                    pos.push(mip.add_var(plo, phi, 0.0, format!("cp_{i}_{k}")));
                    vel.push(mip.add_var(vlo, vhi, 0.0, format!("cv_{i}_{k}")));
                }
                slots[i] = Some(Slot::Vars {
                    pos: pos.clone(),
                    vel: vel.clone(),
                });
                copies.push(CopyVars {
                    vehicle: i,
                    pos,
                    vel,
                });
            }
            Source::Decision => {
                let sys = cfg.mld_system(i)?;
                let mut vv = VehicleVars {
                    vehicle: i,
                    pos: Vec::new(),
                    vel: Vec::new(),
                    u: Vec::new(),
                    bin: Vec::new(),
                    aux: Vec::new(),
                };
                for k in 0..=n {
                    // velocities reachable under the acceleration limits
                    let reach_lo = (v0 + k as f64 * cfg.a_min * cfg.dt).max(b.v_min);
                    let reach_hi = (v0 + k as f64 * cfg.a_max * cfg.dt).min(b.v_max);
                    let (plo, phi, vlo, vhi) = if k == 0 {
                        (x0, x0, v0, v0)
                    } else {
                        (b.p_min, b.p_max, reach_lo, reach_hi)
                    };
                    vv.pos
                        .push(mip.add_var(plo, phi, 0.0, format!("p_{i}_{k}")));
                    vv.vel
                        .push(mip.add_var(vlo, vhi, 0.0, format!("v_{i}_{k}")));
                }
                for k in 0..n {
                    vv.u.push(mip.add_var(-b.u_max, b.u_max, 0.0, format!("u_{i}_{k}")));
                    vv.bin.push(
                        (0..sys.n_binaries())
                            .map(|d| mip.add_binary(0.0, format!("d_{i}_{k}_{d}")))
                            .collect(),
                    );
                    vv.aux.push(
                        sys.aux_bounds
                            .iter()
                            .enumerate()
                            .map(|(z, &(lo, hi))| {
                                mip.add_var(lo, hi, 0.0, format!("z_{i}_{k}_{z}"))
                            })
                            .collect(),
                    );
                }
                for k in 0..n {
                    let (p, v, u) = (vv.pos[k], vv.vel[k], vv.u[k]);
                    let (d, z) = (&vv.bin[k], &vv.aux[k]);
                    for row in &sys.rows {
                        let mut coefs = vec![(p, row.ex[0]), (v, row.ex[1]), (u, row.eu)];
                        coefs.extend(d.iter().zip(&row.ed).map(|(&j, &a)| (j, a)));
                        coefs.extend(z.iter().zip(&row.ez).map(|(&j, &a)| (j, a)));
                        coefs.retain(|c| c.1 != 0.0);
                        match row.kind {
                            RowKind::Le => mip.add_le(coefs, row.rhs),
                            RowKind::Eq => mip.add_eq(coefs, row.rhs),
                        }
                    }
                    for comp in 0..2 {
                        let next = if comp == 0 {
                            vv.pos[k + 1]
                        } else {
                            vv.vel[k + 1]
                        };
                        let mut coefs = vec![
                            (next, -1.0),
                            (p, sys.a[comp][0]),
                            (v, sys.a[comp][1]),
                            (u, sys.b_u[comp]),
                        ];
                        coefs.extend(d.iter().zip(&sys.b_d).map(|(&j, c)| (j, c[comp])));
                        coefs.extend(z.iter().zip(&sys.b_z).map(|(&j, c)| (j, c[comp])));
                        coefs.retain(|c| c.1 != 0.0);
                        mip.add_eq(coefs, -sys.f0[comp]);
                    }
                    // acceleration limits
                    let dv = vec![(vv.vel[k + 1], 1.0), (v, -1.0)];
                    mip.add_le(dv.clone(), cfg.a_max * cfg.dt);
                    mip.add_ge(dv, cfg.a_min * cfg.dt);
                }
                for k in 0..n {
                    encode_scalar_inner(
                        &mut mip,
                        cfg.norm,
                        cfg.q_u,
                        &LinExpr::var(vv.u[k]),
                        1.0,
                        &mut derived,
                    )?;
                }
                slots[i] = Some(Slot::Vars {
                    pos: vv.pos.clone(),
                    vel: vv.vel.clone(),
                });
                vehicles.push(vv);
                systems.push(sys);
            }
        }
    }
    let pos = |slot: &Slot, k: usize| -> LinExpr {
        match slot {
            Slot::Vars { pos, .. } => LinExpr::var(pos[k]),
            Slot::Fixed(t) => LinExpr::constant(t[k].position),
        }
    };
    let vel = |slot: &Slot, k: usize| -> LinExpr {
        match slot {
            Slot::Vars { vel, .. } => LinExpr::var(vel[k]),
            Slot::Fixed(t) => LinExpr::constant(t[k].velocity),
        }
    };
    let is_fixed = |slot: &Slot| matches!(slot, Slot::Fixed(_));

    if let (Some(r), Some(Some(slot))) = (&reference, slots.get(cfg.leader)) {
        for k in 0..=n {
            let e = [
                pos(slot, k).plus(&LinExpr::constant(r[k].position + offset), -1.0),
                vel(slot, k).plus(&LinExpr::constant(r[k].velocity), -1.0),
            ];
            encode_norm_inner(&mut mip, cfg.norm, &cfg.q_x, &e, 1.0, &mut derived)?;
        }
    }

    let (d0, t0) = cfg.spacing.coefficients();
    let mut slacks = Vec::new();
    for rear in 1..m {
        let front = rear - 1;
        let (Some(fs), Some(rs)) = (&slots[front], &slots[rear]) else {
            continue;
        };
        if is_fixed(fs) && is_fixed(rs) {
            continue;
        }
        for k in 0..=n {
            let e = [
                pos(fs, k)
                    .plus(&pos(rs, k), -1.0)
                    .plus(&vel(rs, k), -t0)
                    .plus(&LinExpr::constant(-d0), 1.0),
                vel(fs, k).plus(&vel(rs, k), -1.0),
            ];
            encode_norm_inner(
                &mut mip,
                cfg.norm,
                &cfg.q_x,
                &e,
                spec.pair_scale,
                &mut derived,
            )?;
        }
        for k in 1..=n {
            // x1_rear - x1_front + d_safe <= s
            let expr = pos(rs, k)
                .plus(&pos(fs, k), -1.0)
                .plus(&LinExpr::constant(cfg.d_safe), 1.0);
            let s = mip.add_var(
                0.0,
                f64::INFINITY,
                cfg.slack_weight * spec.slack_scale,
                format!("s_{rear}_{k}"),
            );
            let mut coefs = expr.terms.clone();
            coefs.push((s, -1.0));
            mip.add_le(coefs, -expr.constant);
            derived.push(Derived {
                var: s,
                kind: DerivedKind::PositivePart,
                expr,
            });
            slacks.push(SlackVar {
                front,
                rear,
                step: k,
                var: s,
            });
        }
    }

    for term in &spec.consensus {
        let Some(Some(Slot::Vars { pos: pv, vel: vv })) = slots.get(term.vehicle) else {
            return Err(MpcError::Missing(format!(
                "consensus term for vehicle {} without variables",
                term.vehicle
            )));
        };
        if term.lambda.len() < n + 1 || term.target.len() < n + 1 {
            return Err(MpcError::ReferenceTooShort {
                need: n + 1,
                got: term.lambda.len().min(term.target.len()),
            });
        }
        for k in 0..=n {
            let vars = [pv[k], vv[k]];
            let targets = [term.target[k].position + offset, term.target[k].velocity];
            for c in 0..2 {
                mip.c[vars[c]] += term.lambda[k][c];
                mip.offset -= term.lambda[k][c] * targets[c];
                if term.rho > 0.0 {
                    let e = LinExpr::var(vars[c]).plus(&LinExpr::constant(-targets[c]), 1.0);
                    add_square(&mut mip, &e, 0.5 * term.rho, &mut derived);
                }
            }
        }
    }

    Ok(MpcProblem {
        mip,
        config: cfg.clone(),
        spec,
        frame_offset: offset,
        vehicles,
        copies,
        slacks,
        systems,
        derived,
    })
}

/// The centralized problem over all vehicles.
pub fn build_centralized(
    cfg: &PlatoonConfig,
    states: &[State],
    reference: &[State],
) -> Result<MpcProblem, MpcError> {
    if states.len() != cfg.m() {
        return Err(MpcError::Config(format!(
            "{} states for {} vehicles",
            states.len(),
            cfg.m()
        )));
    }
    let participants = states
        .iter()
        .enumerate()
        .map(|(vehicle, &initial)| Participant {
            vehicle,
            initial,
            source: Source::Decision,
        })
        .collect();
    build_problem(
        cfg,
        ProblemSpec::new(participants, Some(reference.to_vec())),
    )
}

/// Local problem of vehicle `i` against fixed neighbor trajectories.
pub fn build_local(
    cfg: &PlatoonConfig,
    i: usize,
    state: State,
    neighbor_front: Option<&[State]>,
    neighbor_rear: Option<&[State]>,
    reference: Option<&[State]>,
    consensus: Vec<ConsensusTerm>,
) -> Result<MpcProblem, MpcError> {
    let m = cfg.m();
    if i >= m {
        return Err(MpcError::Config(format!(
            "vehicle {i} outside platoon of {m}"
        )));
    }
    if (i > 0) != neighbor_front.is_some() {
        return Err(MpcError::Missing(format!(
            "front neighbor trajectory for vehicle {i}"
        )));
    }
    if (i + 1 < m) != neighbor_rear.is_some() {
        return Err(MpcError::Missing(format!(
            "rear neighbor trajectory for vehicle {i}"
        )));
    }
    if (i == cfg.leader) != reference.is_some() {
        return Err(MpcError::Missing(format!(
            "reference presence mismatch for vehicle {i}"
        )));
    }
    let mut participants = vec![Participant {
        vehicle: i,
        initial: state,
        source: Source::Decision,
    }];
    if let Some(f) = neighbor_front {
        participants.push(Participant {
            vehicle: i - 1,
            initial: f[0],
            source: Source::Fixed(f.to_vec()),
        });
    }
    if let Some(r) = neighbor_rear {
        participants.push(Participant {
            vehicle: i + 1,
            initial: r[0],
            source: Source::Fixed(r.to_vec()),
        });
    }
    let mut spec = ProblemSpec::new(participants, reference.map(<[State]>::to_vec));
    spec.consensus = consensus;
    build_problem(cfg, spec)
}

impl MpcProblem {
    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn plan_vector(
        &self,
        x: &mut [f64],
        plan: &Plan,
        vv: &VehicleVars,
        sys: &MldSystem,
        strict: bool,
    ) -> Result<(), MpcError> {
        let n = self.horizon();
        if plan.states.len() < n + 1 || plan.throttles.len() < n || plan.gears.len() < n {
            return Err(MpcError::SolutionDimension {
                need: n + 1,
                got: plan.states.len(),
            });
        }
        for k in 0..=n {
            x[vv.pos[k]] = plan.states[k].position + self.frame_offset;
            x[vv.vel[k]] = plan.states[k].velocity;
        }
        for k in 0..n {
            x[vv.u[k]] = plan.throttles[k];
            let st = State::new(x[vv.pos[k]], x[vv.vel[k]]);
            match sys.assignment(st, plan.throttles[k], Some(plan.gears[k])) {
                Ok((d, z)) => {
                    vv.bin[k].iter().zip(d).for_each(|(&j, v)| x[j] = v);
                    vv.aux[k].iter().zip(z).for_each(|(&j, v)| x[j] = v);
                }
                Err(e) if strict => return Err(e.into()),
                Err(_) => {}
            }
        }
        Ok(())
    }

    /// Full variable vector for given decision plans and copy trajectories.
    /// Auxiliaries take their tightest values. With `strict`, binaries must be
    /// consistent with the model.
    pub fn encode(
        &self,
        plans: &[Plan],
        copies: &[(usize, Vec<State>)],
        strict: bool,
    ) -> Result<Vec<f64>, MpcError> {
        let mut x: Vec<f64> = (0..self.mip.n())
            .map(|j| {
                if self.mip.lb[j] == self.mip.ub[j] {
                    self.mip.lb[j]
                } else {
                    0.0
                }
            })
            .collect();
        for (vv, sys) in self.vehicles.iter().zip(&self.systems) {
            let plan = plans
                .iter()
                .find(|p| p.vehicle == vv.vehicle)
                .ok_or_else(|| MpcError::Missing(format!("plan for vehicle {}", vv.vehicle)))?;
            self.plan_vector(&mut x, plan, vv, sys, strict)?;
        }
        for cv in &self.copies {
            let traj = copies
                .iter()
                .find(|c| c.0 == cv.vehicle)
                .map(|c| &c.1)
                .ok_or_else(|| {
                    MpcError::Missing(format!("copy trajectory for vehicle {}", cv.vehicle))
                })?;
            for k in 0..=self.horizon() {
                x[cv.pos[k]] = traj[k].position + self.frame_offset;
                x[cv.vel[k]] = traj[k].velocity;
            }
        }
        for d in &self.derived {
            let v = d.expr.eval(&x);
            x[d.var] = match d.kind {
                DerivedKind::Identity => v,
                DerivedKind::Abs => v.abs(),
                DerivedKind::PositivePart => v.max(0.0),
            };
        }
        Ok(x)
    }

    /// Objective of the given plans under this problem's cost.
    pub fn evaluate(
        &self,
        plans: &[Plan],
        copies: &[(usize, Vec<State>)],
    ) -> Result<f64, MpcError> {
        Ok(self.mip.objective(&self.encode(plans, copies, false)?))
    }

    /// Model binaries of a decision vehicle in a solution vector, per step.
    pub fn binary_values(&self, x: &[f64], vehicle: usize) -> Option<Vec<Vec<f64>>> {
        let vv = self.vehicles.iter().find(|v| v.vehicle == vehicle)?;
        Some(
            vv.bin
                .iter()
                .map(|step| step.iter().map(|&j| x[j].round()).collect())
                .collect(),
        )
    }

    /// Fix the model binaries of a decision vehicle, leaving a program whose
    /// only remaining freedom is continuous.
    pub fn fix_binaries(&mut self, vehicle: usize, values: &[Vec<f64>]) -> Result<(), MpcError> {
        let vv = self
            .vehicles
            .iter()
            .find(|v| v.vehicle == vehicle)
            .ok_or_else(|| MpcError::Missing(format!("decision variables of vehicle {vehicle}")))?;
        if values.len() != vv.bin.len()
            || values.iter().zip(&vv.bin).any(|(a, b)| a.len() != b.len())
        {
            return Err(MpcError::SolutionDimension {
                need: vv.bin.len(),
                got: values.len(),
            });
        }
        for (step, vals) in vv.bin.iter().zip(values) {
            for (&j, &v) in step.iter().zip(vals) {
                self.mip.lb[j] = v;
                self.mip.ub[j] = v;
            }
        }
        Ok(())
    }

    /// Recover plans, copies and slacks from a solution vector.
    pub fn decode(&self, x: &[f64]) -> Result<Solution, MpcError> {
        if x.len() != self.mip.n() {
            return Err(MpcError::SolutionDimension {
                need: self.mip.n(),
                got: x.len(),
            });
        }
        let n = self.horizon();
        let tol = 1e-4;
        let objective = self.mip.objective(x);
        let slacks: Vec<(SlackVar, f64)> = self
            .slacks
            .iter()
            .map(|s| (*s, x[s.var].max(0.0)))
            .collect();
        let mut plans = Vec::new();
        for (vv, sys) in self.vehicles.iter().zip(&self.systems) {
            let mut gears = Vec::with_capacity(n);
            let mut modes = Vec::with_capacity(n);
            for k in 0..n {
                let d: Vec<f64> = vv.bin[k].iter().map(|&j| x[j]).collect();
                let gear = sys.gear_of(&d, tol).ok_or(MpcError::NotOneHot {
                    vehicle: vv.vehicle,
                    step: k,
                })?;
                let mode = sys
                    .binaries
                    .iter()
                    .zip(&d)
                    .position(|(l, &v)| match l {
                        BinaryLabel::Region { .. } => v > 0.5,
                        BinaryLabel::FrictionRegion(_) => v > 0.5,
                        BinaryLabel::Gear(_) => false,
                    })
                    .map(|p| match sys.binaries[p] {
                        BinaryLabel::FrictionRegion(r) => r,
                        _ => p,
                    })
                    .ok_or(MpcError::NotOneHot {
                        vehicle: vv.vehicle,
                        step: k,
                    })?;
                gears.push(gear);
                modes.push(mode);
            }
            plans.push(Plan {
                vehicle: vv.vehicle,
                states: (0..=n)
                    .map(|k| State::new(x[vv.pos[k]] - self.frame_offset, x[vv.vel[k]]))
                    .collect(),
                throttles: vv.u.iter().map(|&j| x[j]).collect(),
                gears,
                modes,
                slacks: slacks
                    .iter()
                    .filter(|(s, _)| s.rear == vv.vehicle)
                    .map(|(_, v)| *v)
                    .collect(),
                objective,
            });
        }
        let copies = self
            .copies
            .iter()
            .map(|cv| {
                (
                    cv.vehicle,
                    (0..=n)
                        .map(|k| State::new(x[cv.pos[k]] - self.frame_offset, x[cv.vel[k]]))
                        .collect(),
                )
            })
            .collect();
        Ok(Solution {
            plans,
            copies,
            slacks,
            objective,
        })
    }
}

/// Roll the prediction model forward from `start` under the given throttles.
/// Under Model I the gear follows the region; under Model II the requested
/// gear is moved to the nearest valid one. Velocities are clamped into the
/// box after every step and throttles into the input bound.
pub fn rollout_plan(
    cfg: &PlatoonConfig,
    vehicle: usize,
    start: State,
    throttles: &[f64],
    gears: &[Gear],
) -> Result<Plan, MpcError> {
    let params = cfg
        .vehicles
        .get(vehicle)
        .ok_or_else(|| MpcError::Config(format!("vehicle {vehicle} outside the platoon")))?;
    if gears.len() < throttles.len() {
        return Err(MpcError::SolutionDimension {
            need: throttles.len(),
            got: gears.len(),
        });
    }
    let pwa = match cfg.model {
        ModelKind::PwaGear => Some(build_pwa_model(params, &cfg.gears, &cfg.friction)?),
        ModelKind::DiscreteGear => None,
    };
    let n = throttles.len();
    let mut plan = Plan {
        vehicle,
        states: vec![State::new(
            start.position,
            cfg.clamp_velocity(start.velocity),
        )],
        throttles: Vec::with_capacity(n),
        gears: Vec::with_capacity(n),
        modes: Vec::with_capacity(n),
        slacks: Vec::new(),
        objective: f64::NAN,
    };
    for k in 0..n {
        let x = plan.states[k];
        let u = throttles[k].clamp(-cfg.bounds.u_max, cfg.bounds.u_max);
        let (next, gear, mode) = match &pwa {
            Some(model) => {
                let idx = model
                    .region_index(x.velocity)
                    .ok_or(ModelError::VelocityOutsidePartition(x.velocity))?;
                (
                    model.step_in_region(idx, x, u, cfg.dt),
                    model.regions[idx].gear,
                    idx,
                )
            }
            None => {
                let g = nearest_valid_gear(&cfg.gears, x.velocity, gears[k]);
                let traction = cfg.gears.gear(g).plateau_traction;
                let next = euler_with_traction(params, &cfg.friction, traction, x, u, cfg.dt);
                (next, g, usize::from(x.velocity > cfg.friction.alpha))
            }
        };
        plan.throttles.push(u);
        plan.gears.push(gear);
        plan.modes.push(mode);
        plan.states
            .push(State::new(next.position, cfg.clamp_velocity(next.velocity)));
    }
    Ok(plan)
}

/// Largest per-step deviation between a plan and its re-simulation under the
/// prediction model with the plan's inputs and modes.
pub fn resimulation_error(cfg: &PlatoonConfig, plan: &Plan) -> Result<f64, MpcError> {
    let params = &cfg.vehicles[plan.vehicle];
    let mut worst: f64 = 0.0;
    let pwa = match cfg.model {
        ModelKind::PwaGear => Some(build_pwa_model(params, &cfg.gears, &cfg.friction)?),
        ModelKind::DiscreteGear => None,
    };
    for k in 0..plan.horizon() {
        let x = plan.states[k];
        let u = plan.throttles[k];
        let next = match &pwa {
            Some(model) => {
                if !model.regions[plan.modes[k]].contains_closed(x.velocity, 1e-6) {
                    return Err(MpcError::Mld(MldError::Inconsistent(format!(
                        "velocity {} outside region {} at step {k}",
                        x.velocity, plan.modes[k]
                    ))));
                }
                model.step_in_region(plan.modes[k], x, u, cfg.dt)
            }
            None => {
                let f = &cfg.friction;
                let (a, c) = if plan.modes[k] == 0 {
                    (f.a1, f.c1)
                } else {
                    (f.a2, f.c2)
                };
                let traction = cfg.gears.gear(plan.gears[k]).plateau_traction;
                let acc = -(a * x.velocity + c) / params.mass - params.mu * params.g
                    + traction * u / params.mass;
                State::new(x.position + cfg.dt * x.velocity, x.velocity + cfg.dt * acc)
            }
        };
        worst = worst
            .max((next.position - plan.states[k + 1].position).abs())
            .max((next.velocity - plan.states[k + 1].velocity).abs());
    }
    Ok(worst)
}

/// Stage cost of a platoon snapshot: leader tracking, spacing and inputs.
pub fn stage_cost(
    cfg: &PlatoonConfig,
    states: &[State],
    inputs: Option<&[f64]>,
    reference: State,
) -> f64 {
    let mut j = weighted_norm(
        cfg.norm,
        &cfg.q_x,
        tracking_error(states[cfg.leader], reference),
    );
    for rear in 1..states.len() {
        j += weighted_norm(
            cfg.norm,
            &cfg.q_x,
            spacing_error(&cfg.spacing, states[rear - 1], states[rear]),
        );
    }
    if let Some(u) = inputs {
        j += u
            .iter()
            .map(|&u| input_norm(cfg.norm, cfg.q_u, u))
            .sum::<f64>();
    }
    j
}
