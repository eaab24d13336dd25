//! Longitudinal vehicle models.
//!
//! The plant is the continuous-time nonlinear model
//!
//! ```text
//!     m s'' + c s'^2 + mu m g = b(j, s') u
//! ```
//!
//! with the full per-gear traction curve `b(j, v)`. The prediction models
//! replace the quadratic friction by a two-piece affine approximation and the
//! traction curve by its constant plateau:
//!
//! * Model I ([`PwaModel`]): the gear is a function of the velocity, giving a
//!   piecewise-affine system with seven velocity regions.
//! * Model II: the gear is a free discrete input restricted to the plateau
//!   range of the selected gear (see [`step_model2`]).
//!
//! Both prediction models are discretized with forward Euler.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::ModelError;

/// Physical constants of a single vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Vehicle mass in kg.
    pub mass: f64,
    /// Coulomb friction coefficient.
    pub mu: f64,
    /// Viscous friction coefficient in N s^2 / m^2.
    pub c: f64,
    /// Gravitational acceleration in m / s^2.
    pub g: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 800.0,
            mu: 0.01,
            c: 0.5,
            g: 9.8,
        }
    }
}

impl VehicleParams {
    pub fn with_mass(mass: f64) -> Self {
        Self {
            mass,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.mass > 0.0 && self.mu >= 0.0 && self.c > 0.0 && self.g > 0.0;
        if ok
            && [self.mass, self.mu, self.c, self.g]
                .iter()
                .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(ModelError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Coulomb friction force `mu m g`.
    pub fn coulomb_force(&self) -> f64 {
        self.mu * self.mass * self.g
    }
}

/// A gear number in `1..=6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Gear(u8);

impl Gear {
    pub const COUNT: usize = 6;

    pub fn new(number: u8) -> Option<Self> {
        (1..=Self::COUNT as u8)
            .contains(&number)
            .then_some(Self(number))
    }

    /// Gear from a zero-based index.
    pub fn from_index(index: usize) -> Option<Self> {
        u8::try_from(index + 1).ok().and_then(Self::new)
    }

    /// One-based gear number.
    pub fn number(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl Iterator<Item = Gear> {
        (1..=Self::COUNT as u8).map(Gear)
    }
}

impl TryFrom<u8> for Gear {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Gear::new(value).ok_or_else(|| format!("gear {value} outside 1..=6"))
    }
}

impl From<Gear> for u8 {
    fn from(g: Gear) -> u8 {
        g.0
    }
}

impl fmt::Display for Gear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Traction data of one gear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GearSpec {
    /// Constant traction on the plateau, in N.
    pub plateau_traction: f64,
    /// Lowest velocity of the plateau range used by the prediction models.
    pub v_low: f64,
    /// Highest velocity of the plateau range used by the prediction models.
    pub v_high: f64,
    /// Full traction curve `(velocity, force)` used by the plant: rise,
    /// plateau and fall.
    pub polyline: Vec<(f64, f64)>,
}

impl GearSpec {
    /// Traction of the full curve at `v`, clamped to the endpoint values
    /// outside the polyline span. The flag is set when clamping happened.
    pub fn traction(&self, v: f64) -> (f64, bool) {
        let pts = &self.polyline;
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        if v < first.0 {
            return (first.1, true);
        }
        if v > last.0 {
            return (last.1, true);
        }
        for w in pts.windows(2) {
            let ((v0, f0), (v1, f1)) = (w[0], w[1]);
            if v <= v1 {
                let t = if v1 > v0 { (v - v0) / (v1 - v0) } else { 0.0 };
                return (f0 + t * (f1 - f0), false);
            }
        }
        (last.1, false)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.v_low + self.v_high)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.v_low <= v && v <= self.v_high
    }
}

/// Per-gear traction plateaus and full traction curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GearTable {
    gears: Vec<GearSpec>,
}

impl Default for GearTable {
    fn default() -> Self {
        // (plateau, v_low, v_high, polyline)
        let data: [(f64, f64, f64, [(f64, f64); 4]); 6] = [
            (
                4057.0,
                3.94,
                9.46,
                [
                    (2.0706, 253.54),
                    (4.12158, 4056.7),
                    (9.29, 4056.7),
                    (12.38, 3042.52),
                ],
            ),
            (
                2945.0,
                5.43,
                13.04,
                [
                    (2.85, 184.0),
                    (5.675, 2944.75),
                    (12.7956, 2944.75),
                    (17.06, 2208.55),
                ],
            ),
            (
                2116.0,
                7.56,
                18.15,
                [
                    (3.9705, 132.22),
                    (7.90316, 2115.6),
                    (17.8105, 2115.6),
                    (23.7474, 1586.7),
                ],
            ),
            (
                1607.0,
                9.96,
                23.90,
                [
                    (5.228, 100.415),
                    (10.42, 1605.0),
                    (23.454, 1605.0),
                    (31.2704, 1205.0),
                ],
            ),
            (
                1166.0,
                13.70,
                32.93,
                [
                    (7.203, 72.88),
                    (14.335, 1166.0),
                    (32.31, 1166.0),
                    (43.0802, 874.7),
                ],
            ),
            (
                838.0,
                19.10,
                45.84,
                [
                    (10.027, 52.4),
                    (19.956, 838.0),
                    (44.978, 838.0),
                    (59.9715, 628.3),
                ],
            ),
        ];
        let gears = data
            .iter()
            .map(|(b, lo, hi, poly)| GearSpec {
                plateau_traction: *b,
                v_low: *lo,
                v_high: *hi,
                polyline: poly.to_vec(),
            })
            .collect();
        Self { gears }
    }
}

impl GearTable {
    pub fn new(gears: Vec<GearSpec>) -> Result<Self, ModelError> {
        let table = Self { gears };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidGearTable(msg));
        if self.gears.len() != Gear::COUNT {
            return bad(format!(
                "expected {} gears, got {}",
                Gear::COUNT,
                self.gears.len()
            ));
        }
        for (j, g) in self.gears.iter().enumerate() {
            if !(g.v_low < g.v_high) {
                return bad(format!("gear {}: v_low must be below v_high", j + 1));
            }
            if g.polyline.len() < 2 || g.polyline.windows(2).any(|w| w[0].0 > w[1].0) {
                return bad(format!("gear {}: polyline needs sorted points", j + 1));
            }
        }
        for (j, w) in self.gears.windows(2).enumerate() {
            let (a, b) = (&w[0], &w[1]);
            if !(b.plateau_traction < a.plateau_traction) {
                return bad(format!("plateau traction must decrease at gear {}", j + 2));
            }
            if !(a.v_low < b.v_low && a.v_high < b.v_high) {
                return bad(format!("velocity ranges must increase at gear {}", j + 2));
            }
            if !(b.v_low < a.v_high) {
                return bad(format!("gears {} and {} do not overlap", j + 1, j + 2));
            }
        }
        Ok(())
    }

    pub fn gear(&self, gear: Gear) -> &GearSpec {
        &self.gears[gear.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Gear, &GearSpec)> {
        Gear::all().zip(self.gears.iter())
    }

    /// Lowest velocity covered by any plateau.
    pub fn v_min(&self) -> f64 {
        self.gears[0].v_low
    }

    /// Highest velocity covered by any plateau.
    pub fn v_max(&self) -> f64 {
        self.gears[Gear::COUNT - 1].v_high
    }
}

/// Gears whose plateau range contains `v`. Empty outside the covered span.
pub fn valid_gears(gears: &GearTable, v: f64) -> Vec<Gear> {
    gears
        .iter()
        .filter(|(_, spec)| spec.contains(v))
        .map(|(g, _)| g)
        .collect()
}

/// The valid gear closest to `requested` at velocity `v`. Ties go to the
/// lower gear. Returns `requested` when it is valid, and the nearest plateau
/// when `v` lies outside every range.
pub fn nearest_valid_gear(gears: &GearTable, v: f64, requested: Gear) -> Gear {
    let valid = valid_gears(gears, v);
    if valid.contains(&requested) {
        return requested;
    }
    if let Some(&g) = valid
        .iter()
        .min_by_key(|g| (g.number() as i32 - requested.number() as i32).abs())
    {
        return g;
    }
    if v < gears.v_min() {
        Gear::new(1).unwrap()
    } else {
        Gear::new(Gear::COUNT as u8).unwrap()
    }
}

/// Position and velocity of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub position: f64,
    pub velocity: f64,
}

impl State {
    pub fn new(position: f64, velocity: f64) -> Self {
        Self { position, velocity }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.position, self.velocity]
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.velocity.is_finite()
    }
}

/// Time derivative of the plant state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantDerivative {
    pub position: f64,
    pub velocity: f64,
    /// Set when the velocity was outside the traction polyline span.
    pub traction_clamped: bool,
}

/// The continuous-time nonlinear plant.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: VehicleParams,
    pub gears: GearTable,
}

impl Plant {
    pub fn new(params: VehicleParams, gears: GearTable) -> Self {
        Self { params, gears }
    }

    pub fn derivative(&self, state: State, throttle: f64, gear: Gear) -> PlantDerivative {
        plant_derivative(&self.params, &self.gears, state, throttle, gear)
    }

    pub fn integrate(
        &self,
        state: State,
        throttle: f64,
        gear: Gear,
        dt: f64,
        substeps: usize,
    ) -> State {
        plant_integrate(
            &self.params,
            &self.gears,
            state,
            throttle,
            gear,
            dt,
            substeps,
        )
    }
}

pub fn plant_derivative(
    params: &VehicleParams,
    gears: &GearTable,
    state: State,
    throttle: f64,
    gear: Gear,
) -> PlantDerivative {
    let v = state.velocity;
    let (traction, clamped) = gears.gear(gear).traction(v);
    let force = -params.c * v * v - params.coulomb_force() + traction * throttle;
    PlantDerivative {
        position: v,
        velocity: force / params.mass,
        traction_clamped: clamped,
    }
}

/// Default number of RK4 sub-intervals per sampling period.
pub const DEFAULT_SUBSTEPS: usize = 16;

/// Classical RK4 over `substeps` equal sub-intervals with the inputs held.
pub fn plant_integrate(
    params: &VehicleParams,
    gears: &GearTable,
    state: State,
    throttle: f64,
    gear: Gear,
    dt: f64,
    substeps: usize,
) -> State {
    integrate_with_trace(params, gears, state, throttle, gear, dt, substeps).0
}

/// Like [`plant_integrate`] but also returns the state at every sub-interval
/// boundary (including the initial state) and whether traction clamping
/// occurred anywhere.
pub fn integrate_with_trace(
    params: &VehicleParams,
    gears: &GearTable,
    state: State,
    throttle: f64,
    gear: Gear,
    dt: f64,
    substeps: usize,
) -> (State, Vec<State>, bool) {
    let mut trace = vec![state];
    if dt <= 0.0 || substeps == 0 {
        return (state, trace, false);
    }
    let h = dt / substeps as f64;
    let mut x = state;
    let mut clamped = false;
    let mut f = |s: State| {
        let d = plant_derivative(params, gears, s, throttle, gear);
        clamped |= d.traction_clamped;
        [d.position, d.velocity]
    };
    for _ in 0..substeps {
        let add = |s: State, k: [f64; 2], w: f64| {
            State::new(s.position + w * k[0], s.velocity + w * k[1])
        };
        let k1 = f(x);
        let k2 = f(add(x, k1, 0.5 * h));
        let k3 = f(add(x, k2, 0.5 * h));
        let k4 = f(add(x, k3, h));
        x = State::new(
            x.position + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x.velocity + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        );
        trace.push(x);
    }
    (x, trace, clamped)
}

/// Two-piece affine approximation of the quadratic friction `c v^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwaFriction {
    pub alpha: f64,
    pub a1: f64,
    pub c1: f64,
    pub a2: f64,
    pub c2: f64,
}

impl PwaFriction {
    /// The approximation through `(0, 0)`, `(v_max/2, 3 c v_max^2 / 16)` and
    /// `(v_max, c v_max^2)`.
    pub fn from_anchors(c: f64, v_max: f64) -> Self {
        Self {
            alpha: 0.5 * v_max,
            a1: 3.0 / 8.0 * c * v_max,
            c1: 0.0,
            a2: 13.0 / 8.0 * c * v_max,
            c2: -5.0 / 8.0 * c * v_max * v_max,
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        if v <= self.alpha {
            self.a1 * v + self.c1
        } else {
            self.a2 * v + self.c2
        }
    }

    /// `(slope, offset)` of the piece active at `v`.
    pub fn piece(&self, v: f64) -> (f64, f64) {
        if v <= self.alpha {
            (self.a1, self.c1)
        } else {
            (self.a2, self.c2)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let gap = (self.a1 * self.alpha + self.c1) - (self.a2 * self.alpha + self.c2);
        if gap.abs() > 1e-9 || self.c1 != 0.0 || self.a1 < 0.0 || self.a2 < 0.0 {
            return Err(ModelError::InvalidFriction(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `f_hat(v)`.
pub fn pwa_friction_eval(f: &PwaFriction, v: f64) -> f64 {
    f.eval(v)
}

/// One affine region of Model I.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwaRegion {
    pub v_lo: f64,
    pub v_hi: f64,
    /// Friction slope on this interval (N s / m).
    pub friction_slope: f64,
    /// Friction offset on this interval (N).
    pub friction_offset: f64,
    /// Plateau traction of the implied gear (N).
    pub traction: f64,
    pub gear: Gear,
}

impl PwaRegion {
    /// Velocity derivative of the prediction model in this region.
    pub fn acceleration(&self, mass: f64, mu: f64, g: f64, v: f64, throttle: f64) -> f64 {
        -(self.friction_slope * v + self.friction_offset) / mass - mu * g
            + self.traction * throttle / mass
    }

    pub fn contains_closed(&self, v: f64, tol: f64) -> bool {
        self.v_lo - tol <= v && v <= self.v_hi + tol
    }
}

/// Model I: velocity-partitioned piecewise-affine dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaModel {
    pub mass: f64,
    pub mu: f64,
    pub g: f64,
    pub friction: PwaFriction,
    pub regions: Vec<PwaRegion>,
}

pub const MODEL_I_REGIONS: usize = 7;

/// Partition `[v_1L, v_6H]` at the gear plateau midpoints and the friction
/// breakpoint.
pub fn build_pwa_model(
    params: &VehicleParams,
    gears: &GearTable,
    friction: &PwaFriction,
) -> Result<PwaModel, ModelError> {
    params.validate()?;
    gears.validate()?;
    friction.validate()?;
    let mut bounds: Vec<(f64, f64, Gear)> = Vec::new();
    for (gear, spec) in gears.iter() {
        let lo = if gear.index() == 0 {
            spec.v_low
        } else {
            spec.midpoint()
        };
        let hi = match Gear::from_index(gear.index() + 1) {
            Some(next) => gears.gear(next).midpoint(),
            None => spec.v_high,
        };
        bounds.push((lo, hi, gear));
    }
    let alpha = friction.alpha;
    if bounds
        .iter()
        .any(|(lo, hi, _)| *lo == alpha || *hi == alpha)
    {
        return Err(ModelError::DegeneratePartition(alpha));
    }
    let mut regions = Vec::new();
    for (lo, hi, gear) in bounds {
        let traction = gears.gear(gear).plateau_traction;
        let pieces: Vec<(f64, f64)> = if lo < alpha && alpha < hi {
            vec![(lo, alpha), (alpha, hi)]
        } else {
            vec![(lo, hi)]
        };
        for (a, b) in pieces {
            let (slope, offset) = friction.piece(0.5 * (a + b));
            regions.push(PwaRegion {
                v_lo: a,
                v_hi: b,
                friction_slope: slope,
                friction_offset: offset,
                traction,
                gear,
            });
        }
    }
    Ok(PwaModel {
        mass: params.mass,
        mu: params.mu,
        g: params.g,
        friction: *friction,
        regions,
    })
}

impl PwaModel {
    pub fn v_min(&self) -> f64 {
        self.regions[0].v_lo
    }

    pub fn v_max(&self) -> f64 {
        self.regions[self.regions.len() - 1].v_hi
    }

    /// Index of the region containing `v`; intervals are half-open except the
    /// last one, which includes `v_max`.
    pub fn region_index(&self, v: f64) -> Option<usize> {
        let last = self.regions.len() - 1;
        self.regions
            .iter()
            .position(|r| r.v_lo <= v && v < r.v_hi)
            .or_else(|| (v == self.regions[last].v_hi).then_some(last))
    }

    pub fn region(&self, v: f64) -> Result<&PwaRegion, ModelError> {
        self.region_index(v)
            .map(|i| &self.regions[i])
            .ok_or(ModelError::VelocityOutsidePartition(v))
    }

    pub fn implied_gear(&self, v: f64) -> Result<Gear, ModelError> {
        Ok(self.region(v)?.gear)
    }

    /// Region indices whose closed interval carries `gear` and contains `v`.
    pub fn regions_of_gear(&self, gear: Gear) -> impl Iterator<Item = usize> + '_ {
        self.regions
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.gear == gear)
            .map(|(i, _)| i)
    }

    /// One forward-Euler step in a given region.
    pub fn step_in_region(&self, region: usize, state: State, throttle: f64, dt: f64) -> State {
        let r = &self.regions[region];
        let acc = r.acceleration(self.mass, self.mu, self.g, state.velocity, throttle);
        State::new(
            state.position + dt * state.velocity,
            state.velocity + dt * acc,
        )
    }
}

/// One forward-Euler step of Model I. The returned gear is implied by the
/// current (pre-step) velocity.
pub fn step_model1(
    model: &PwaModel,
    state: State,
    throttle: f64,
    dt: f64,
) -> Result<(State, Gear), ModelError> {
    let idx = model
        .region_index(state.velocity)
        .ok_or(ModelError::VelocityOutsidePartition(state.velocity))?;
    Ok((
        model.step_in_region(idx, state, throttle, dt),
        model.regions[idx].gear,
    ))
}

/// One forward-Euler step of Model II with the gear as an input. Fails when
/// the gear is not valid at the current velocity.
pub fn step_model2(
    params: &VehicleParams,
    gears: &GearTable,
    friction: &PwaFriction,
    state: State,
    throttle: f64,
    gear: Gear,
    dt: f64,
) -> Result<State, ModelError> {
    let spec = gears.gear(gear);
    if !spec.contains(state.velocity) {
        return Err(ModelError::InvalidGear {
            gear: gear.number(),
            velocity: state.velocity,
        });
    }
    Ok(euler_with_traction(
        params,
        friction,
        spec.plateau_traction,
        state,
        throttle,
        dt,
    ))
}

/// Forward-Euler step of the PWA-friction dynamics for a given traction.
pub fn euler_with_traction(
    params: &VehicleParams,
    friction: &PwaFriction,
    traction: f64,
    state: State,
    throttle: f64,
    dt: f64,
) -> State {
    let v = state.velocity;
    let acc =
        -friction.eval(v) / params.mass - params.mu * params.g + traction * throttle / params.mass;
    State::new(state.position + dt * v, v + dt * acc)
}

/// Throttle that makes `v` a fixed point of the discrete Model I velocity
/// update, `u = (f_hat(v) + mu g m) / b_hat(v)`.
pub fn steady_throttle(model: &PwaModel, v: f64) -> Result<f64, ModelError> {
    let r = model.region(v)?;
    Ok(((r.friction_slope * v + r.friction_offset) + model.mu * model.g * model.mass) / r.traction)
}

/// The two readings of the speed-holding throttle formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThrottleReading {
    /// Traction gain `b_hat / m`, as in the continuous model.
    DynamicsConsistent,
    /// Traction gain `b_hat` with no mass division: `u = (f_hat / m + mu g) / b_hat`.
    UnscaledGain,
}

/// Speed-holding throttle at `v` for an explicit traction value.
pub fn holding_throttle(
    params: &VehicleParams,
    friction: &PwaFriction,
    traction: f64,
    v: f64,
    reading: ThrottleReading,
) -> f64 {
    let fhat = friction.eval(v);
    match reading {
        ThrottleReading::DynamicsConsistent => (fhat + params.coulomb_force()) / traction,
        ThrottleReading::UnscaledGain => (fhat / params.mass + params.mu * params.g) / traction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn model() -> PwaModel {
        let p = VehicleParams::default();
        let f = PwaFriction::from_anchors(p.c, 45.84);
        build_pwa_model(&p, &GearTable::default(), &f).unwrap()
    }

    #[test]
    fn default_gear_table_is_valid() {
        GearTable::default().validate().unwrap();
    }

    #[test]
    fn gear_table_rejects_non_decreasing_traction() {
        let mut t = GearTable::default();
        t.gears[3].plateau_traction = 5000.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn plant_acceleration_on_plateau() {
        let p = VehicleParams::default();
        let d = plant_derivative(
            &p,
            &GearTable::default(),
            State::new(0.0, 6.0),
            1.0,
            Gear::new(1).unwrap(),
        );
        // (-0.5*36 - 0.01*800*9.8 + 4056.7) / 800
        assert_abs_diff_eq!(d.velocity, 4.950375, epsilon = 1e-12);
        assert_eq!(d.position, 6.0);
        assert!(!d.traction_clamped);
    }

    #[test]
    fn plant_zero_throttle_decelerates() {
        let p = VehicleParams::default();
        for v in [4.0, 20.0, 45.0] {
            let d = plant_derivative(
                &p,
                &GearTable::default(),
                State::new(0.0, v),
                0.0,
                Gear::new(3).unwrap(),
            );
            assert_abs_diff_eq!(
                d.velocity,
                -(p.c * v * v + p.coulomb_force()) / p.mass,
                epsilon = 1e-12
            );
            assert!(d.velocity < 0.0);
        }
    }

    #[test]
    fn traction_on_falling_segment() {
        let (v0, f0, v1, f1) = (9.29, 4056.7, 12.38, 3042.52);
        let expected = f0 + (10.8 - v0) * (f1 - f0) / (v1 - v0);
        let (t, clamped) = GearTable::default()
            .gear(Gear::new(1).unwrap())
            .traction(10.8);
        assert_abs_diff_eq!(t, expected, epsilon = 1e-9);
        assert!((t - 3561.1).abs() < 0.05);
        assert!(!clamped);
    }

    #[test]
    fn traction_clamps_outside_span() {
        let g = GearTable::default();
        let spec = g.gear(Gear::new(6).unwrap());
        assert_eq!(spec.traction(5.0), (52.4, true));
        assert_eq!(spec.traction(70.0), (628.3, true));
    }

    #[test]
    fn integrate_zero_horizon_is_identity() {
        let p = VehicleParams::default();
        let s = State::new(3.0, 12.0);
        assert_eq!(
            plant_integrate(
                &p,
                &GearTable::default(),
                s,
                0.7,
                Gear::new(2).unwrap(),
                0.0,
                16
            ),
            s
        );
    }

    #[test]
    fn friction_anchor_values() {
        let f = PwaFriction::from_anchors(0.5, 45.84);
        assert_eq!(f.eval(0.0), 0.0);
        assert_abs_diff_eq!(f.eval(22.92), 196.9974, epsilon = 1e-9);
        assert_abs_diff_eq!(f.eval(45.84), 1050.6528, epsilon = 1e-9);
        assert_abs_diff_eq!(f.a1, 8.595, epsilon = 1e-12);
        f.validate().unwrap();
    }

    #[test]
    fn pwa_boundaries_are_gear_midpoints() {
        let m = model();
        assert_eq!(m.regions.len(), MODEL_I_REGIONS);
        let mut edges: Vec<f64> = m.regions.iter().map(|r| r.v_lo).collect();
        edges.push(m.v_max());
        edges.retain(|e| (e - 22.92).abs() > 1e-12);
        let expected = [3.94, 9.235, 12.855, 16.93, 23.315, 32.47, 45.84];
        assert_eq!(edges.len(), expected.len());
        for (a, b) in edges.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(m.implied_gear(10.0).unwrap(), Gear::new(2).unwrap());
    }

    #[test]
    fn alpha_on_gear_boundary_is_degenerate() {
        let p = VehicleParams::default();
        let mut f = PwaFriction::from_anchors(p.c, 45.84);
        // move the breakpoint onto the gear 5 boundary, keeping continuity
        let alpha = GearTable::default().gear(Gear::new(5).unwrap()).midpoint();
        f.alpha = alpha;
        f.a1 = 8.0;
        f.c2 = f.a1 * alpha - f.a2 * alpha;
        let err = build_pwa_model(&p, &GearTable::default(), &f).unwrap_err();
        assert!(matches!(err, ModelError::DegeneratePartition(_)));
    }

    #[test]
    fn valid_gear_sets() {
        let g = GearTable::default();
        let nums = |v| {
            valid_gears(&g, v)
                .iter()
                .map(|g| g.number())
                .collect::<Vec<_>>()
        };
        assert_eq!(nums(9.0), vec![1, 2, 3]);
        assert_eq!(nums(10.0), vec![2, 3, 4]);
        assert_eq!(nums(3.94), vec![1]);
        assert_eq!(nums(20.0), vec![4, 5, 6]);
        assert!(nums(2.0).is_empty());
        assert!(nums(50.0).is_empty());
    }

    #[test]
    fn model1_hand_step() {
        let m = model();
        let (next, gear) = step_model1(&m, State::new(0.0, 6.0), 1.0, 1.0).unwrap();
        let expected_v = 6.0 + (-8.595 * 6.0 / 800.0 - 0.098 + 4057.0 / 800.0);
        assert_abs_diff_eq!(next.position, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next.velocity, expected_v, epsilon = 1e-12);
        assert_abs_diff_eq!(next.velocity, 10.9087875, epsilon = 1e-9);
        assert_eq!(gear.number(), 1);
    }

    #[test]
    fn model1_outside_partition_errors() {
        assert!(step_model1(&model(), State::new(0.0, 3.0), 0.0, 1.0).is_err());
        assert!(step_model1(&model(), State::new(0.0, 45.84), 0.0, 1.0).is_ok());
    }

    #[test]
    fn steady_throttle_is_fixed_point() {
        let m = model();
        for i in 0..=100 {
            let v = 3.94 + (45.84 - 3.94) * i as f64 / 100.0;
            let u = steady_throttle(&m, v).unwrap();
            assert!(u > 0.0);
            let (next, _) = step_model1(&m, State::new(0.0, v), u, 1.0).unwrap();
            assert!((next.velocity - v).abs() <= 1e-12 * v.max(1.0));
        }
    }

    #[test]
    fn steady_throttle_at_top_speed() {
        let m = model();
        let u = steady_throttle(&m, 45.84).unwrap();
        assert_abs_diff_eq!(u, (1050.6528 + 78.4) / 838.0, epsilon = 1e-9);
        let p = VehicleParams::default();
        let lit = holding_throttle(&p, &m.friction, 838.0, 45.84, ThrottleReading::UnscaledGain);
        assert_abs_diff_eq!(lit, (1050.6528 / 800.0 + 0.098) / 838.0, epsilon = 1e-12);
    }

    #[test]
    fn model2_rejects_invalid_gear() {
        let p = VehicleParams::default();
        let f = PwaFriction::from_anchors(p.c, 45.84);
        let g = GearTable::default();
        assert!(step_model2(
            &p,
            &g,
            &f,
            State::new(0.0, 30.0),
            0.5,
            Gear::new(1).unwrap(),
            1.0
        )
        .is_err());
    }

    #[test]
    fn nearest_gear_clamping() {
        let g = GearTable::default();
        let one = Gear::new(1).unwrap();
        assert_eq!(nearest_valid_gear(&g, 20.0, one).number(), 4);
        assert_eq!(
            nearest_valid_gear(&g, 20.0, Gear::new(5).unwrap()).number(),
            5
        );
        assert_eq!(
            nearest_valid_gear(&g, 1.0, Gear::new(4).unwrap()).number(),
            1
        );
    }
}
