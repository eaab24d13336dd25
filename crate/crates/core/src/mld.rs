//! Mixed-logical-dynamical form of the two prediction models.
//!
//! A compiled [`MldSystem`] describes one sampling step
//!
//! ```text
//!     x+ = A x + B_u u + B_d d + B_z z + f0
//!     E_x x + E_u u + E_d d + E_z z (<= | =) e
//! ```
//!
//! with binary `d` and continuous auxiliaries `z`.
//!
//! Model I uses one binary per velocity region. The products `d_r x2` and
//! `d_r u` are disaggregated: each region carries its own copy of velocity and
//! throttle, bounded by the region interval when active and pinned to zero
//! otherwise, and the copies sum to the true values.
//!
//! Model II uses six gear binaries and two friction-region binaries. Gear
//! validity is encoded with per-gear big-M rows and each product `d_j u` with
//! the four-row McCormick envelope.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::MldError;
use crate::models::{Gear, GearTable, PwaFriction, PwaModel, State, VehicleParams};

/// Which prediction model is compiled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Velocity-partitioned PWA gear model.
    #[serde(rename = "I")]
    PwaGear,
    /// Gear as a discrete input.
    #[serde(rename = "II")]
    DiscreteGear,
}

impl ModelKind {
    pub fn binaries_per_step(self) -> usize {
        match self {
            ModelKind::PwaGear => 7,
            ModelKind::DiscreteGear => 8,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::PwaGear => "I",
            ModelKind::DiscreteGear => "II",
        }
    }
}

/// State and input box required by the conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub p_min: f64,
    pub p_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub u_max: f64,
}

impl Default for BoxBounds {
    fn default() -> Self {
        Self {
            p_min: 0.0,
            p_max: 10_000.0,
            v_min: 3.94,
            v_max: 45.84,
            u_max: 1.0,
        }
    }
}

impl BoxBounds {
    pub fn validate(&self) -> Result<(), MldError> {
        let vals = [self.p_min, self.p_max, self.v_min, self.v_max, self.u_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(MldError::UnboundedBox(format!("{self:?}")));
        }
        if !(self.p_min < self.p_max && self.v_min < self.v_max && self.u_max > 0.0) {
            return Err(MldError::UnboundedBox(format!(
                "empty interval in {self:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: State, u: f64, tol: f64) -> bool {
        self.p_min - tol <= x.position
            && x.position <= self.p_max + tol
            && self.v_min - tol <= x.velocity
            && x.velocity <= self.v_max + tol
            && u.abs() <= self.u_max + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BinaryLabel {
    /// Model I region with its implied gear.
    Region { index: usize, gear: Gear },
    /// Model II gear selector.
    Gear(Gear),
    /// Model II friction piece (0: below the breakpoint, 1: above).
    FrictionRegion(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AuxLabel {
    RegionVelocity(usize),
    RegionThrottle(usize),
    GearThrottle(Gear),
    FrictionVelocity(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Le,
    Eq,
}

/// One mixed-integer linear row over `(x, u, d, z)` for a single step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MldRow {
    pub ex: [f64; 2],
    pub eu: f64,
    pub ed: Vec<f64>,
    pub ez: Vec<f64>,
    pub rhs: f64,
    pub kind: RowKind,
    pub label: String,
}

impl MldRow {
    fn new(n_d: usize, n_z: usize, kind: RowKind, rhs: f64, label: impl Into<String>) -> Self {
        Self {
            ex: [0.0; 2],
            eu: 0.0,
            ed: vec![0.0; n_d],
            ez: vec![0.0; n_z],
            rhs,
            kind,
            label: label.into(),
        }
    }

    pub fn lhs(&self, x: State, u: f64, d: &[f64], z: &[f64]) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        self.ex[0] * x.position
            + self.ex[1] * x.velocity
            + self.eu * u
            + dot(&self.ed, d)
            + dot(&self.ez, z)
    }

    pub fn satisfied(&self, x: State, u: f64, d: &[f64], z: &[f64], tol: f64) -> bool {
        let r = self.lhs(x, u, d, z) - self.rhs;
        match self.kind {
            RowKind::Le => r <= tol,
            RowKind::Eq => r.abs() <= tol,
        }
    }
}

/// A compiled single-step MLD model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MldSystem {
    pub kind: ModelKind,
    pub dt: f64,
    pub a: [[f64; 2]; 2],
    pub b_u: [f64; 2],
    /// Column of `B_d` per binary.
    pub b_d: Vec<[f64; 2]>,
    /// Column of `B_z` per auxiliary.
    pub b_z: Vec<[f64; 2]>,
    pub f0: [f64; 2],
    pub rows: Vec<MldRow>,
    pub binaries: Vec<BinaryLabel>,
    pub aux: Vec<AuxLabel>,
    pub aux_bounds: Vec<(f64, f64)>,
    pub bounds: BoxBounds,
    /// Model I velocity intervals (empty for Model II).
    pub regions: Vec<(f64, f64)>,
    pub friction: PwaFriction,
}

impl MldSystem {
    pub fn n_binaries(&self) -> usize {
        self.binaries.len()
    }

    pub fn n_aux(&self) -> usize {
        self.aux.len()
    }

    /// Gear encoded by a one-hot binary vector; `None` when no binary of the
    /// gear-carrying kind is set within `tol`.
    pub fn gear_of(&self, d: &[f64], tol: f64) -> Option<Gear> {
        let mut found = None;
        for (label, &v) in self.binaries.iter().zip(d) {
            let g = match label {
                BinaryLabel::Region { gear, .. } => *gear,
                BinaryLabel::Gear(g) => *g,
                BinaryLabel::FrictionRegion(_) => continue,
            };
            if (v - 1.0).abs() <= tol {
                if found.is_some() {
                    return None;
                }
                found = Some(g);
            } else if v.abs() > tol {
                return None;
            }
        }
        found
    }

    /// The binary and auxiliary values consistent with `(x, u)` and, for
    /// Model II, the selected gear. Model I picks the region by the
    /// half-open interval convention unless `gear` pins a region of that gear.
    pub fn assignment(
        &self,
        x: State,
        u: f64,
        gear: Option<Gear>,
    ) -> Result<(Vec<f64>, Vec<f64>), MldError> {
        let v = x.velocity;
        let mut d = vec![0.0; self.n_binaries()];
        match self.kind {
            ModelKind::PwaGear => {
                let last = self.regions.len() - 1;
                let by_velocity = self
                    .regions
                    .iter()
                    .position(|&(lo, hi)| lo <= v && v < hi)
                    .or_else(|| (v == self.regions[last].1).then_some(last));
                let idx = match gear {
                    Some(g) => self
                        .binaries
                        .iter()
                        .enumerate()
                        .filter(|(_, l)| matches!(l, BinaryLabel::Region { gear, .. } if *gear == g))
                        .map(|(i, _)| i)
                        .find(|&i| {
                            let (lo, hi) = self.regions[i];
                            lo - 1e-9 <= v && v <= hi + 1e-9
                        })
                        .or(by_velocity.filter(|&i| {
                            matches!(self.binaries[i], BinaryLabel::Region { gear, .. } if gear == g)
                        })),
                    None => by_velocity,
                }
                .ok_or_else(|| MldError::Inconsistent(format!("no region for velocity {v}")))?;
                d[idx] = 1.0;
            }
            ModelKind::DiscreteGear => {
                let g = gear.ok_or(MldError::MissingGear)?;
                for (i, label) in self.binaries.iter().enumerate() {
                    match label {
                        BinaryLabel::Gear(h) if *h == g => d[i] = 1.0,
                        BinaryLabel::FrictionRegion(0) if v <= self.friction.alpha => d[i] = 1.0,
                        BinaryLabel::FrictionRegion(1) if v > self.friction.alpha => d[i] = 1.0,
                        _ => {}
                    }
                }
            }
        }
        let z = self
            .aux
            .iter()
            .map(|label| {
                let (bin, factor) = match label {
                    AuxLabel::RegionVelocity(r) => (*r, v),
                    AuxLabel::RegionThrottle(r) => (*r, u),
                    AuxLabel::GearThrottle(g) => (self.binary_of_gear(*g), u),
                    AuxLabel::FrictionVelocity(r) => (self.binary_of_friction(*r), v),
                };
                d[bin] * factor
            })
            .collect();
        Ok((d, z))
    }

    fn binary_of_gear(&self, g: Gear) -> usize {
        self.binaries
            .iter()
            .position(|l| *l == BinaryLabel::Gear(g))
            .expect("gear binary present")
    }

    fn binary_of_friction(&self, r: usize) -> usize {
        self.binaries
            .iter()
            .position(|l| *l == BinaryLabel::FrictionRegion(r))
            .expect("friction binary present")
    }

    /// Successor state for given binaries and auxiliaries.
    pub fn successor(&self, x: State, u: f64, d: &[f64], z: &[f64]) -> State {
        let xs = x.to_array();
        let mut next = [0.0; 2];
        for (row, out) in next.iter_mut().enumerate() {
            let mut acc =
                self.a[row][0] * xs[0] + self.a[row][1] * xs[1] + self.b_u[row] * u + self.f0[row];
            acc += self.b_d.iter().zip(d).map(|(c, v)| c[row] * v).sum::<f64>();
            acc += self.b_z.iter().zip(z).map(|(c, v)| c[row] * v).sum::<f64>();
            *out = acc;
        }
        State::new(next[0], next[1])
    }

    /// Labels of rows violated by the given point.
    pub fn violated_rows(&self, x: State, u: f64, d: &[f64], z: &[f64], tol: f64) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| !r.satisfied(x, u, d, z, tol))
            .map(|r| r.label.as_str())
            .collect()
    }
}

/// Per-gear big-M constants `(M_H, M_L)` for the plateau-range implications.
pub fn big_m_bounds(gears: &GearTable, bounds: &BoxBounds) -> (Vec<f64>, Vec<f64>) {
    gears
        .iter()
        .map(|(_, g)| {
            (
                (bounds.v_max - g.v_high).max(0.0),
                (g.v_low - bounds.v_min).max(0.0),
            )
        })
        .unzip()
}

fn check_region_box(model: &PwaModel, bounds: &BoxBounds) -> Result<(), MldError> {
    let tol = 1e-9;
    if (model.v_min() - bounds.v_min).abs() > tol || (model.v_max() - bounds.v_max).abs() > tol {
        return Err(MldError::OutOfBox(format!(
            "regions span [{}, {}] but the velocity box is [{}, {}]",
            model.v_min(),
            model.v_max(),
            bounds.v_min,
            bounds.v_max
        )));
    }
    Ok(())
}

/// Compile Model I.
pub fn build_mld_model1(
    model: &PwaModel,
    bounds: &BoxBounds,
    dt: f64,
) -> Result<MldSystem, MldError> {
    bounds.validate()?;
    check_region_box(model, bounds)?;
    let nr = model.regions.len();
    let n_d = nr;
    let n_z = 2 * nr;
    let (m, u_max) = (model.mass, bounds.u_max);
    let zx = |r: usize| r;
    let zu = |r: usize| nr + r;

    let mut rows = Vec::new();
    let mut onehot = MldRow::new(n_d, n_z, RowKind::Eq, 1.0, "one-hot regions");
    onehot.ed.iter_mut().for_each(|c| *c = 1.0);
    rows.push(onehot);

    let mut vsum = MldRow::new(
        n_d,
        n_z,
        RowKind::Eq,
        0.0,
        "region velocity copies sum to x2",
    );
    vsum.ex[1] = -1.0;
    let mut usum = MldRow::new(
        n_d,
        n_z,
        RowKind::Eq,
        0.0,
        "region throttle copies sum to u",
    );
    usum.eu = -1.0;
    for r in 0..nr {
        vsum.ez[zx(r)] = 1.0;
        usum.ez[zu(r)] = 1.0;
    }
    rows.push(vsum);
    rows.push(usum);

    for (r, reg) in model.regions.iter().enumerate() {
        let mut hi = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            0.0,
            format!("region {r}: zx <= v_hi d"),
        );
        hi.ez[zx(r)] = 1.0;
        hi.ed[r] = -reg.v_hi;
        let mut lo = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            0.0,
            format!("region {r}: zx >= v_lo d"),
        );
        lo.ez[zx(r)] = -1.0;
        lo.ed[r] = reg.v_lo;
        let mut uhi = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            0.0,
            format!("region {r}: zu <= u_max d"),
        );
        uhi.ez[zu(r)] = 1.0;
        uhi.ed[r] = -u_max;
        let mut ulo = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            0.0,
            format!("region {r}: zu >= -u_max d"),
        );
        ulo.ez[zu(r)] = -1.0;
        ulo.ed[r] = -u_max;
        rows.extend([hi, lo, uhi, ulo]);
    }

    let mut b_d = vec![[0.0; 2]; n_d];
    let mut b_z = vec![[0.0; 2]; n_z];
    for (r, reg) in model.regions.iter().enumerate() {
        b_d[r] = [0.0, -dt * reg.friction_offset / m];
        b_z[zx(r)] = [0.0, -dt * reg.friction_slope / m];
        b_z[zu(r)] = [0.0, dt * reg.traction / m];
    }
    let mut aux = Vec::with_capacity(n_z);
    let mut aux_bounds = Vec::with_capacity(n_z);
    for r in 0..nr {
        aux.push(AuxLabel::RegionVelocity(r));
        aux_bounds.push((0.0, model.regions[r].v_hi));
    }
    for r in 0..nr {
        aux.push(AuxLabel::RegionThrottle(r));
        aux_bounds.push((-u_max, u_max));
    }
    Ok(MldSystem {
        kind: ModelKind::PwaGear,
        dt,
        a: [[1.0, dt], [0.0, 1.0]],
        b_u: [0.0, 0.0],
        b_d,
        b_z,
        f0: [0.0, -dt * model.mu * model.g],
        rows,
        binaries: model
            .regions
            .iter()
            .enumerate()
            .map(|(index, r)| BinaryLabel::Region {
                index,
                gear: r.gear,
            })
            .collect(),
        aux,
        aux_bounds,
        bounds: *bounds,
        regions: model.regions.iter().map(|r| (r.v_lo, r.v_hi)).collect(),
        friction: model.friction,
    })
}

/// Compile Model II.
pub fn build_mld_model2(
    params: &VehicleParams,
    gears: &GearTable,
    friction: &PwaFriction,
    bounds: &BoxBounds,
    dt: f64,
) -> Result<MldSystem, MldError> {
    bounds.validate()?;
    params.validate()?;
    gears.validate()?;
    friction.validate()?;
    let ng = Gear::COUNT;
    let n_d = ng + 2;
    let n_z = ng + 2;
    let fr = |r: usize| ng + r; // friction binary / aux index
    let (m, u_max) = (params.mass, bounds.u_max);
    let (m_high, m_low) = big_m_bounds(gears, bounds);

    let mut rows = Vec::new();
    let mut gsum = MldRow::new(n_d, n_z, RowKind::Eq, 1.0, "one-hot gears");
    (0..ng).for_each(|j| gsum.ed[j] = 1.0);
    rows.push(gsum);
    let mut fsum = MldRow::new(n_d, n_z, RowKind::Eq, 1.0, "one-hot friction pieces");
    fsum.ed[fr(0)] = 1.0;
    fsum.ed[fr(1)] = 1.0;
    rows.push(fsum);

    for (gear, spec) in gears.iter() {
        let j = gear.index();
        // x2 - v_H <= M_H (1 - d)
        let mut hi = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            spec.v_high + m_high[j],
            format!("gear {gear}: x2 <= v_high"),
        );
        hi.ex[1] = 1.0;
        hi.ed[j] = m_high[j];
        // v_L - x2 <= M_L (1 - d)
        let mut lo = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            m_low[j] - spec.v_low,
            format!("gear {gear}: x2 >= v_low"),
        );
        lo.ex[1] = -1.0;
        lo.ed[j] = m_low[j];
        rows.extend([hi, lo]);

        // z = d u with u in [-U, U]
        let mut r1 = MldRow::new(n_d, n_z, RowKind::Le, 0.0, format!("gear {gear}: z <= U d"));
        r1.ez[j] = 1.0;
        r1.ed[j] = -u_max;
        let mut r2 = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            0.0,
            format!("gear {gear}: z >= -U d"),
        );
        r2.ez[j] = -1.0;
        r2.ed[j] = -u_max;
        let mut r3 = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            u_max,
            format!("gear {gear}: z <= u + U (1 - d)"),
        );
        r3.ez[j] = 1.0;
        r3.eu = -1.0;
        r3.ed[j] = u_max;
        let mut r4 = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            u_max,
            format!("gear {gear}: z >= u - U (1 - d)"),
        );
        r4.ez[j] = -1.0;
        r4.eu = 1.0;
        r4.ed[j] = u_max;
        rows.extend([r1, r2, r3, r4]);
    }
    let mut usum = MldRow::new(
        n_d,
        n_z,
        RowKind::Eq,
        0.0,
        "gear throttle products sum to u",
    );
    usum.eu = -1.0;
    (0..ng).for_each(|j| usum.ez[j] = 1.0);
    rows.push(usum);

    let pieces = [
        (bounds.v_min, friction.alpha),
        (friction.alpha, bounds.v_max),
    ];
    let mut wsum = MldRow::new(
        n_d,
        n_z,
        RowKind::Eq,
        0.0,
        "friction velocity copies sum to x2",
    );
    wsum.ex[1] = -1.0;
    for (r, (lo_v, hi_v)) in pieces.iter().enumerate() {
        let mut hi = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            0.0,
            format!("friction {r}: w <= v_hi d"),
        );
        hi.ez[fr(r)] = 1.0;
        hi.ed[fr(r)] = -hi_v;
        let mut lo = MldRow::new(
            n_d,
            n_z,
            RowKind::Le,
            0.0,
            format!("friction {r}: w >= v_lo d"),
        );
        lo.ez[fr(r)] = -1.0;
        lo.ed[fr(r)] = *lo_v;
        rows.extend([hi, lo]);
        wsum.ez[fr(r)] = 1.0;
    }
    rows.push(wsum);

    let mut b_d = vec![[0.0; 2]; n_d];
    let mut b_z = vec![[0.0; 2]; n_z];
    for (gear, spec) in gears.iter() {
        b_z[gear.index()] = [0.0, dt * spec.plateau_traction / m];
    }
    let slopes = [(friction.a1, friction.c1), (friction.a2, friction.c2)];
    for (r, (a, c)) in slopes.iter().enumerate() {
        b_z[fr(r)] = [0.0, -dt * a / m];
        b_d[fr(r)] = [0.0, -dt * c / m];
    }

    let mut binaries: Vec<BinaryLabel> = Gear::all().map(BinaryLabel::Gear).collect();
    binaries.extend([
        BinaryLabel::FrictionRegion(0),
        BinaryLabel::FrictionRegion(1),
    ]);
    let mut aux: Vec<AuxLabel> = Gear::all().map(AuxLabel::GearThrottle).collect();
    aux.extend([AuxLabel::FrictionVelocity(0), AuxLabel::FrictionVelocity(1)]);
    let mut aux_bounds = vec![(-u_max, u_max); ng];
    aux_bounds.extend([(0.0, friction.alpha), (0.0, bounds.v_max)]);

    Ok(MldSystem {
        kind: ModelKind::DiscreteGear,
        dt,
        a: [[1.0, dt], [0.0, 1.0]],
        b_u: [0.0, 0.0],
        b_d,
        b_z,
        f0: [0.0, -dt * params.mu * params.g],
        rows,
        binaries,
        aux,
        aux_bounds,
        bounds: *bounds,
        regions: Vec::new(),
        friction: *friction,
    })
}

/// One step of the MLD model obtained by direct evaluation of the consistent
/// binary/auxiliary assignment.
pub fn mld_simulate(
    sys: &MldSystem,
    x: State,
    u: f64,
    gear: Option<Gear>,
) -> Result<State, MldError> {
    if !sys.bounds.contains(x, u, 1e-12) {
        return Err(MldError::OutOfBox(format!("x = {x:?}, u = {u}")));
    }
    let (d, z) = sys.assignment(x, u, gear)?;
    let violated = sys.violated_rows(x, u, &d, &z, 1e-9);
    if !violated.is_empty() {
        return Err(MldError::Inconsistent(violated.join("; ")));
    }
    Ok(sys.successor(x, u, &d, &z))
}

fn fmt_terms(row: &MldRow) -> String {
    let mut parts = Vec::new();
    let mut push = |c: f64, name: String| {
        if c != 0.0 {
            parts.push(format!("{c:+} {name}"));
        }
    };
    push(row.ex[0], "x1".into());
    push(row.ex[1], "x2".into());
    push(row.eu, "u".into());
    for (i, c) in row.ed.iter().enumerate() {
        push(*c, format!("d{i}"));
    }
    for (i, c) in row.ez.iter().enumerate() {
        push(*c, format!("z{i}"));
    }
    parts.join(" ")
}

impl fmt::Display for MldSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# MLD model {} ({} binaries, {} auxiliaries, dt = {})",
            self.kind.label(),
            self.n_binaries(),
            self.n_aux(),
            self.dt
        )?;
        for (i, b) in self.binaries.iter().enumerate() {
            writeln!(f, "# d{i}: {b:?}")?;
        }
        for (i, a) in self.aux.iter().enumerate() {
            writeln!(
                f,
                "# z{i}: {a:?} in [{}, {}]",
                self.aux_bounds[i].0, self.aux_bounds[i].1
            )?;
        }
        for (k, name) in ["x1+", "x2+"].iter().enumerate() {
            let mut terms = vec![
                format!("{:+} x1", self.a[k][0]),
                format!("{:+} x2", self.a[k][1]),
            ];
            for (i, c) in self.b_d.iter().enumerate() {
                if c[k] != 0.0 {
                    terms.push(format!("{:+} d{i}", c[k]));
                }
            }
            for (i, c) in self.b_z.iter().enumerate() {
                if c[k] != 0.0 {
                    terms.push(format!("{:+} z{i}", c[k]));
                }
            }
            writeln!(f, "{name} = {} {:+}", terms.join(" "), self.f0[k])?;
        }
        for row in &self.rows {
            let op = match row.kind {
                RowKind::Le => "<=",
                RowKind::Eq => "=",
            };
            writeln!(f, "{} {op} {}    # {}", fmt_terms(row), row.rhs, row.label)?;
        }
        Ok(())
    }
}
