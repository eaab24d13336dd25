//! Sparse mixed-integer programs with binary variables.
//!
//! Objective `c^T v + 1/2 v^T H v + offset`, rows `A v <= b` and
//! `A_eq v = b_eq`, per-variable bounds and an integrality mask. Continuous
//! relaxations with a quadratic term are solved by an interior-point method.
//! Linear relaxations inside [`solve_bnb`] use a dual simplex that is warm
//! started from the parent node.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::rc::Rc;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::MipError;

/// One sparse linear row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinRow {
    pub coefs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinRow {
    pub fn activity(&self, v: &[f64]) -> f64 {
        self.coefs.iter().map(|&(j, a)| a * v[j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MixedIntegerProgram {
    pub c: Vec<f64>,
    pub offset: f64,
    /// Upper-triangular entries `(i, j, h)` with `i <= j`; `h` is `H[i][j] = H[j][i]`.
    /// Duplicates accumulate.
    pub h: Vec<(usize, usize, f64)>,
    pub ineq: Vec<LinRow>,
    pub eq: Vec<LinRow>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub binary: Vec<bool>,
    pub names: Vec<String>,
}

impl MixedIntegerProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn n_binaries(&self) -> usize {
        self.binary.iter().filter(|b| **b).count()
    }

    pub fn binary_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.binary[j]).collect()
    }

    pub fn add_var(&mut self, lb: f64, ub: f64, cost: f64, name: impl Into<String>) -> usize {
        self.c.push(cost);
        self.lb.push(lb);
        self.ub.push(ub);
        self.binary.push(false);
        self.names.push(name.into());
        self.n() - 1
    }

    pub fn add_binary(&mut self, cost: f64, name: impl Into<String>) -> usize {
        let j = self.add_var(0.0, 1.0, cost, name);
        self.binary[j] = true;
        j
    }

    pub fn add_le(&mut self, coefs: Vec<(usize, f64)>, rhs: f64) {
        self.ineq.push(LinRow { coefs, rhs });
    }

    pub fn add_ge(&mut self, coefs: Vec<(usize, f64)>, rhs: f64) {
        let coefs = coefs.into_iter().map(|(j, a)| (j, -a)).collect();
        self.ineq.push(LinRow { coefs, rhs: -rhs });
    }

    pub fn add_eq(&mut self, coefs: Vec<(usize, f64)>, rhs: f64) {
        self.eq.push(LinRow { coefs, rhs });
    }

    /// Add `h` to `H[i][j]` and `H[j][i]`.
    pub fn add_quad(&mut self, i: usize, j: usize, h: f64) {
        if h != 0.0 {
            self.h.push((i.min(j), i.max(j), h));
        }
    }

    /// Add `weight * (sum a_k v_k + constant)^2` to the objective.
    pub fn add_square(&mut self, terms: &[(usize, f64)], constant: f64, weight: f64) {
        if weight == 0.0 {
            return;
        }
        for (p, &(i, a)) in terms.iter().enumerate() {
            self.c[i] += 2.0 * weight * a * constant;
            self.add_quad(i, i, 2.0 * weight * a * a);
            for &(j, b) in &terms[p + 1..] {
                if i == j {
                    self.add_quad(i, i, 4.0 * weight * a * b);
                } else {
                    self.add_quad(i, j, 2.0 * weight * a * b);
                }
            }
        }
        self.offset += weight * constant * constant;
    }

    /// Merged upper-triangular entries, sorted.
    pub fn h_merged(&self) -> Vec<(usize, usize, f64)> {
        let mut t = self.h.clone();
        t.sort_by_key(|a| (a.0, a.1));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(t.len());
        for (i, j, v) in t {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        out
    }

    pub fn objective(&self, v: &[f64]) -> f64 {
        let lin: f64 = self.c.iter().zip(v).map(|(a, b)| a * b).sum();
        let quad: f64 = self
            .h
            .iter()
            .map(|&(i, j, h)| {
                if i == j {
                    0.5 * h * v[i] * v[i]
                } else {
                    h * v[i] * v[j]
                }
            })
            .sum();
        lin + quad + self.offset
    }

    /// Maximum violation over rows, bounds and integrality.
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for r in &self.ineq {
            worst = worst.max(r.activity(v) - r.rhs);
        }
        for r in &self.eq {
            worst = worst.max((r.activity(v) - r.rhs).abs());
        }
        for j in 0..self.n() {
            worst = worst.max(self.lb[j] - v[j]).max(v[j] - self.ub[j]);
            if self.binary[j] {
                worst = worst.max((v[j] - v[j].round()).abs());
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<(), MipError> {
        let n = self.n();
        if self.lb.len() != n
            || self.ub.len() != n
            || self.binary.len() != n
            || self.names.len() != n
        {
            return Err(MipError::Dimension(format!(
                "{n} costs, {} lower, {} upper, {} mask, {} names",
                self.lb.len(),
                self.ub.len(),
                self.binary.len(),
                self.names.len()
            )));
        }
        for row in self.ineq.iter().chain(&self.eq) {
            if let Some(&(j, _)) = row.coefs.iter().find(|(j, _)| *j >= n) {
                return Err(MipError::Dimension(format!(
                    "row references variable {j} of {n}"
                )));
            }
        }
        if let Some(&(i, j, _)) = self.h.iter().find(|(i, j, _)| *i >= n || *j >= n) {
            return Err(MipError::Dimension(format!(
                "quadratic entry ({i}, {j}) outside {n}"
            )));
        }
        for j in 0..n {
            if self.binary[j] && (self.lb[j] < 0.0 || self.ub[j] > 1.0) {
                return Err(MipError::BinaryBounds(j));
            }
        }
        if !self.h_is_psd() {
            return Err(MipError::NotPsd);
        }
        Ok(())
    }

    /// PSD check by pivoted LDL^T on the variables touched by `H`.
    pub fn h_is_psd(&self) -> bool {
        let entries = self.h_merged();
        if entries.is_empty() {
            return true;
        }
        let mut idx: Vec<usize> = entries.iter().flat_map(|e| [e.0, e.1]).collect();
        idx.sort_unstable();
        idx.dedup();
        let pos: HashMap<usize, usize> = idx.iter().enumerate().map(|(p, &j)| (j, p)).collect();
        let k = idx.len();
        let mut m = vec![vec![0.0; k]; k];
        for (i, j, h) in entries {
            let (a, b) = (pos[&i], pos[&j]);
            m[a][b] = h;
            m[b][a] = h;
        }
        let scale = m.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
        let tol = 1e-10 * scale.max(1.0);
        let mut active: Vec<usize> = (0..k).collect();
        while !active.is_empty() {
            let (p_pos, &p) = active
                .iter()
                .enumerate()
                .max_by(|a, b| m[*a.1][*a.1].total_cmp(&m[*b.1][*b.1]))
                .unwrap();
            let d = m[p][p];
            if d < -tol {
                return false;
            }
            active.remove(p_pos);
            if d <= tol {
                if active
                    .iter()
                    .any(|&i| m[i][p].abs() > 1e-7 * scale.max(1.0))
                {
                    return false;
                }
                continue;
            }
            for &i in &active {
                let f = m[i][p] / d;
                if f == 0.0 {
                    continue;
                }
                for &j in &active {
                    m[i][j] -= f * m[p][j];
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelaxStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// Continuous relaxation outcome. `duals` are ordered as the equality rows
/// followed by the inequality rows of the program.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub status: RelaxStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub duals: Vec<f64>,
}

impl Relaxation {
    fn failed(status: RelaxStatus, n: usize, rows: usize) -> Self {
        Self {
            status,
            x: vec![f64::NAN; n],
            objective: f64::INFINITY,
            duals: vec![0.0; rows],
        }
    }
}

/// Solve the program with integrality dropped.
pub fn solve_relaxation(p: &MixedIntegerProgram) -> Result<Relaxation, MipError> {
    p.validate()?;
    Ok(relax_with_bounds(p, &p.lb, &p.ub, 1e-7))
}

/// Relaxation under replacement bounds. Variables with equal bounds are
/// substituted out before the interior-point call.
pub fn relax_with_bounds(
    p: &MixedIntegerProgram,
    lb: &[f64],
    ub: &[f64],
    feas_tol: f64,
) -> Relaxation {
    let n = p.n();
    let n_rows = p.eq.len() + p.ineq.len();
    if (0..n).any(|j| lb[j] > ub[j] + feas_tol) {
        return Relaxation::failed(RelaxStatus::Infeasible, n, n_rows);
    }
    let fixed: Vec<Option<f64>> = (0..n)
        .map(|j| (ub[j] - lb[j] <= 0.0).then_some(lb[j]))
        .collect();
    let mut map = vec![usize::MAX; n];
    let mut free = Vec::new();
    for j in 0..n {
        if fixed[j].is_none() {
            map[j] = free.len();
            free.push(j);
        }
    }
    let nf = free.len();

    let mut q: Vec<f64> = free.iter().map(|&j| p.c[j]).collect();
    let mut constant = p.offset;
    for j in 0..n {
        if let Some(v) = fixed[j] {
            constant += p.c[j] * v;
        }
    }
    let mut p_trip: Vec<(usize, usize, f64)> = Vec::new();
    for (i, j, h) in p.h_merged() {
        match (fixed[i], fixed[j]) {
            (None, None) => p_trip.push((map[i], map[j], h)),
            (Some(a), None) => q[map[j]] += h * a,
            (None, Some(b)) => q[map[i]] += h * b,
            (Some(a), Some(b)) => constant += if i == j { 0.5 * h * a * a } else { h * a * b },
        }
    }

    // (reduced row, original row index, is equality)
    let mut rows: Vec<(Vec<(usize, f64)>, f64, usize)> = Vec::new();
    let mut n_eq = 0;
    let reduce = |row: &LinRow| -> (Vec<(usize, f64)>, f64) {
        let mut rhs = row.rhs;
        let mut coefs = Vec::with_capacity(row.coefs.len());
        for &(j, a) in &row.coefs {
            match fixed[j] {
                Some(v) => rhs -= a * v,
                None => coefs.push((map[j], a)),
            }
        }
        (coefs, rhs)
    };
    for (r, row) in p.eq.iter().enumerate() {
        let (coefs, rhs) = reduce(row);
        if coefs.is_empty() {
            if rhs.abs() > feas_tol * (1.0 + row.rhs.abs()) {
                return Relaxation::failed(RelaxStatus::Infeasible, n, n_rows);
            }
            continue;
        }
        rows.push((coefs, rhs, r));
        n_eq += 1;
    }
    for (r, row) in p.ineq.iter().enumerate() {
        let (coefs, rhs) = reduce(row);
        if coefs.is_empty() {
            if rhs < -feas_tol * (1.0 + row.rhs.abs()) {
                return Relaxation::failed(RelaxStatus::Infeasible, n, n_rows);
            }
            continue;
        }
        rows.push((coefs, rhs, p.eq.len() + r));
    }
    let n_general = rows.len();
    for (k, &j) in free.iter().enumerate() {
        if ub[j].is_finite() {
            rows.push((vec![(k, 1.0)], ub[j], usize::MAX));
        }
        if lb[j].is_finite() {
            rows.push((vec![(k, -1.0)], -lb[j], usize::MAX));
        }
    }

    let mut x: Vec<f64> = fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
    let mut duals = vec![0.0; n_rows];
    if nf == 0 {
        return Relaxation {
            status: RelaxStatus::Optimal,
            objective: constant,
            x,
            duals,
        };
    }

    let (mut ri, mut ci, mut vi) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::with_capacity(rows.len());
    for (r, (coefs, rhs, _)) in rows.iter().enumerate() {
        for &(k, a) in coefs {
            ri.push(r);
            ci.push(k);
            vi.push(a);
        }
        b.push(*rhs);
    }
    let a_mat = CscMatrix::new_from_triplets(rows.len(), nf, ri, ci, vi);
    let p_mat = CscMatrix::new_from_triplets(
        nf,
        nf,
        p_trip.iter().map(|t| t.0.min(t.1)).collect(),
        p_trip.iter().map(|t| t.0.max(t.1)).collect(),
        p_trip.iter().map(|t| t.2).collect(),
    );
    let mut cones = Vec::new();
    if n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq));
    }
    if rows.len() > n_eq {
        cones.push(SupportedConeT::NonnegativeConeT(rows.len() - n_eq));
    }
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(300)
        .tol_gap_abs(1e-9)
        .tol_gap_rel(1e-9)
        .tol_feas(1e-9)
        .build()
        .expect("static solver settings");
    let mut solver = match DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings) {
        Ok(s) => s,
        Err(_) => return Relaxation::failed(RelaxStatus::NumericalFailure, n, n_rows),
    };
    solver.solve();
    let status = match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => RelaxStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            RelaxStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => RelaxStatus::Unbounded,
        _ => RelaxStatus::NumericalFailure,
    };
    if status != RelaxStatus::Optimal {
        return Relaxation::failed(status, n, n_rows);
    }
    for (k, &j) in free.iter().enumerate() {
        // interior-point iterates may sit marginally outside the box
        x[j] = solver.solution.x[k].clamp(lb[j], ub[j]);
    }
    for (r, (_, _, orig)) in rows.iter().enumerate().take(n_general) {
        duals[*orig] = solver.solution.z[r];
    }
    Relaxation {
        status,
        objective: p.objective(&x),
        x,
        duals,
    }
}

/// Queue length beyond which queued nodes no longer keep their parent's
/// simplex state.
const WARM_QUEUE_LIMIT: usize = 256;

/// Simplex state of a solved node together with the binary fixings it was
/// solved under.
struct Warm {
    sol: microlp::Solution,
    vars: Rc<Vec<microlp::Variable>>,
    fix: Vec<i8>,
}

fn simplex_problem(
    p: &MixedIntegerProgram,
    lb: &[f64],
    ub: &[f64],
) -> (microlp::Problem, Vec<microlp::Variable>) {
    use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
    let mut prob = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..p.n())
        .map(|j| prob.add_var(p.c[j], (lb[j], ub[j])))
        .collect();
    // the simplex backend needs sorted, unique column indices per row
    let expr = |row: &LinRow| {
        let mut merged: Vec<(usize, f64)> = row.coefs.clone();
        merged.sort_by_key(|t| t.0);
        merged.dedup_by(|next, kept| {
            let same = next.0 == kept.0;
            if same {
                kept.1 += next.1;
            }
            same
        });
        let mut e = LinearExpr::empty();
        for (j, a) in merged {
            if a != 0.0 {
                e.add(vars[j], a);
            }
        }
        e
    };
    for row in &p.eq {
        prob.add_constraint(expr(row), ComparisonOp::Eq, row.rhs);
    }
    for row in &p.ineq {
        prob.add_constraint(expr(row), ComparisonOp::Le, row.rhs);
    }
    (prob, vars)
}

enum SimplexOutcome {
    Solved(Relaxation, microlp::Solution),
    Infeasible,
    /// Unbounded or numerically failed; the caller falls back to the
    /// interior-point path.
    Failed,
}

fn simplex_relaxation(
    p: &MixedIntegerProgram,
    vars: &[microlp::Variable],
    sol: microlp::Solution,
    lb: &[f64],
    ub: &[f64],
) -> SimplexOutcome {
    let n_rows = p.eq.len() + p.ineq.len();
    let x: Vec<f64> = (0..p.n())
        .map(|j| sol.var_value_raw(vars[j]).clamp(lb[j], ub[j]))
        .collect();
    let relax = Relaxation {
        status: RelaxStatus::Optimal,
        objective: p.objective(&x),
        x,
        duals: vec![0.0; n_rows],
    };
    SimplexOutcome::Solved(relax, sol)
}

fn simplex_from_outcome(
    p: &MixedIntegerProgram,
    vars: &[microlp::Variable],
    out: Result<microlp::SolveOutcome, microlp::Error>,
    lb: &[f64],
    ub: &[f64],
) -> SimplexOutcome {
    match out {
        Ok(o) => match o.into_solution() {
            Ok(sol) => simplex_relaxation(p, vars, sol, lb, ub),
            Err(_) => SimplexOutcome::Failed,
        },
        Err(microlp::Error::Infeasible) => SimplexOutcome::Infeasible,
        Err(_) => SimplexOutcome::Failed,
    }
}

/// Solve a node relaxation of a linear program, re-using the parent simplex
/// state when available. Fixings the current vertex already satisfies are
/// not pushed into the simplex state; the returned vector records those that
/// were.
fn simplex_node(
    p: &MixedIntegerProgram,
    warm: Option<&Warm>,
    bins: &[usize],
    fix: &[i8],
    lb: &[f64],
    ub: &[f64],
) -> (SimplexOutcome, Vec<i8>) {
    let Some(w) = warm else {
        let (prob, vars) = simplex_problem(p, lb, ub);
        return (
            simplex_from_outcome(p, &vars, prob.solve(), lb, ub),
            fix.to_vec(),
        );
    };
    let vars = &w.vars;
    let mut sol = w.sol.clone();
    let mut applied = w.fix.clone();
    loop {
        let pending = (0..bins.len()).find(|&k| {
            fix[k] >= 0
                && applied[k] != fix[k]
                && (sol.var_value_raw(vars[bins[k]]) - fix[k] as f64).abs() > 1e-9
        });
        let Some(k) = pending else { break };
        match sol.fix_var(vars[bins[k]], fix[k] as f64) {
            Ok(o) => match o.into_solution() {
                Ok(next) => sol = next,
                Err(_) => return (SimplexOutcome::Failed, applied),
            },
            Err(microlp::Error::Infeasible) => return (SimplexOutcome::Infeasible, applied),
            Err(_) => return (SimplexOutcome::Failed, applied),
        }
        applied[k] = fix[k];
    }
    (simplex_relaxation(p, vars, sol, lb, ub), applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branching {
    MostFractional,
    FirstFractional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeSelection {
    /// Best bound with depth-first dives after each branching.
    BestBound,
    DepthFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub integrality_tol: f64,
    pub gap_rel: f64,
    pub gap_abs: f64,
    pub node_limit: usize,
    /// Seconds; `None` disables the limit.
    pub time_limit: Option<f64>,
    pub branching: Branching,
    pub node_selection: NodeSelection,
    pub seed: u64,
    pub prune: bool,
    pub propagate: bool,
    pub record_nodes: bool,
    /// Branch on ordered halves of one-hot binary groups.
    pub sos_branching: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-7,
            integrality_tol: 1e-6,
            gap_rel: 1e-8,
            gap_abs: 1e-9,
            node_limit: 200_000,
            time_limit: None,
            branching: Branching::MostFractional,
            node_selection: NodeSelection::BestBound,
            seed: 0,
            prune: true,
            propagate: true,
            record_nodes: false,
            sos_branching: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), String> {
        let tols = [
            self.feasibility_tol,
            self.integrality_tol,
            self.gap_rel,
            self.gap_abs,
        ];
        if tols.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err("solver tolerances must be positive".into());
        }
        if self.node_limit == 0 {
            return Err("node limit must be at least 1".into());
        }
        if matches!(self.time_limit, Some(t) if !(t > 0.0)) {
            return Err("time limit must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnbStatus {
    Optimal,
    Infeasible,
    NodeLimit,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub depth: usize,
    pub relaxation: f64,
    /// Global lower bound after processing this node.
    pub global_bound: f64,
    /// Binary fixings as `(variable, value)`.
    pub fixings: Vec<(usize, u8)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbResult {
    pub status: BnbStatus,
    pub incumbent: Option<Vec<f64>>,
    pub objective: f64,
    pub best_bound: f64,
    pub explored_nodes: usize,
    pub wall_time: f64,
    pub numerical_failures: usize,
    pub nodes: Vec<NodeRecord>,
}

struct Node {
    fix: Vec<i8>,
    bound: f64,
    depth: usize,
    seq: u64,
    warm: Option<Rc<Warm>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // max-heap: smaller bound first, then earlier insertion
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Lowest bound over the open nodes and the incumbent.
fn open_bound(heap: &BinaryHeap<Node>, dive: &Option<Node>, inc_obj: f64) -> f64 {
    heap.peek()
        .map(|nd| nd.bound)
        .into_iter()
        .chain(dive.as_ref().map(|d| d.bound))
        .fold(inc_obj, f64::min)
}

/// Tighten bounds by activity arguments. Returns `false` on proven infeasibility.
fn propagate(p: &MixedIntegerProgram, lb: &mut [f64], ub: &mut [f64], tol: f64) -> bool {
    let mut rows: Vec<(&LinRow, bool)> = p.ineq.iter().map(|r| (r, false)).collect();
    rows.extend(p.eq.iter().map(|r| (r, true)));
    for _pass in 0..8 {
        let mut changed = false;
        for &(row, is_eq) in &rows {
            let senses: &[f64] = if is_eq { &[1.0, -1.0] } else { &[1.0] };
            for &s in senses {
                // s * a x <= s * rhs
                let rhs = s * row.rhs;
                let mut min_act = 0.0;
                let mut n_inf = 0;
                let mut inf_var = usize::MAX;
                for &(j, a) in &row.coefs {
                    let a = s * a;
                    let t = if a > 0.0 { a * lb[j] } else { a * ub[j] };
                    if t.is_finite() {
                        min_act += t;
                    } else {
                        n_inf += 1;
                        inf_var = j;
                    }
                }
                if n_inf == 0 && min_act > rhs + tol * (1.0 + rhs.abs()) {
                    return false;
                }
                if n_inf > 1 {
                    continue;
                }
                for &(j, a) in &row.coefs {
                    if !p.binary[j] {
                        continue;
                    }
                    let a = s * a;
                    let own = if a > 0.0 { a * lb[j] } else { a * ub[j] };
                    let rest = if n_inf == 1 {
                        if inf_var != j {
                            continue;
                        }
                        min_act
                    } else {
                        min_act - own
                    };
                    let slack = rhs - rest;
                    if a > 0.0 {
                        let bound = slack / a;
                        if bound < 1.0 - tol && ub[j] > 0.0 {
                            if bound < -tol {
                                return false;
                            }
                            ub[j] = 0.0;
                            changed = true;
                        }
                    } else if a < 0.0 {
                        let bound = slack / a;
                        if bound > tol && lb[j] < 1.0 {
                            if bound > 1.0 + tol {
                                return false;
                            }
                            lb[j] = 1.0;
                            changed = true;
                        }
                    }
                    if lb[j] > ub[j] {
                        return false;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    true
}

/// Equality rows `sum of binaries = 1`, as positions into `bins`, and the
/// group of each binary (first match).
fn one_hot_groups(
    p: &MixedIntegerProgram,
    bins: &[usize],
) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
    let pos: HashMap<usize, usize> = bins.iter().enumerate().map(|(k, &j)| (j, k)).collect();
    let mut groups = Vec::new();
    let mut group_of = vec![None; bins.len()];
    for row in &p.eq {
        if row.rhs != 1.0 || row.coefs.len() < 3 {
            continue;
        }
        let members: Option<Vec<usize>> = row
            .coefs
            .iter()
            .map(|&(j, a)| (a == 1.0).then(|| pos.get(&j).copied()).flatten())
            .collect();
        let Some(mut members) = members else { continue };
        members.sort_unstable();
        members.dedup();
        if members.len() != row.coefs.len() || members.iter().any(|&k| group_of[k].is_some()) {
            continue;
        }
        for &k in &members {
            group_of[k] = Some(groups.len());
        }
        groups.push(members);
    }
    (groups, group_of)
}

/// Split the unfixed members of a one-hot group into a head and a tail at
/// the weighted centre of the relaxation values. `None` when fewer than three
/// members are free.
fn split_group(
    groups: &[Vec<usize>],
    g: Option<usize>,
    fix: &[i8],
    bins: &[usize],
    x: &[f64],
) -> Option<(Vec<usize>, Vec<usize>)> {
    let free: Vec<usize> = groups[g?].iter().copied().filter(|&k| fix[k] < 0).collect();
    if free.len() < 3 {
        return None;
    }
    let total: f64 = free.iter().map(|&k| x[bins[k]]).sum();
    let centre: f64 = free
        .iter()
        .enumerate()
        .map(|(r, &k)| r as f64 * x[bins[k]])
        .sum::<f64>()
        / total.max(1e-12);
    let cut = (centre.floor() as usize + 1).clamp(1, free.len() - 1);
    Some((free[..cut].to_vec(), free[cut..].to_vec()))
}

fn most_fractional(
    p: &MixedIntegerProgram,
    bins: &[usize],
    x: &[f64],
    opts: &SolverOptions,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in bins {
        let f = (x[j] - x[j].floor()).min(x[j].ceil() - x[j]);
        if f > opts.integrality_tol {
            match opts.branching {
                Branching::FirstFractional => return Some(j),
                Branching::MostFractional => {
                    if best.map_or(true, |(_, bf)| f > bf + 1e-12) {
                        best = Some((j, f));
                    }
                }
            }
        }
    }
    let _ = p;
    best.map(|b| b.0)
}

/// Branch and bound without a warm-start hint.
pub fn solve_bnb(p: &MixedIntegerProgram, opts: &SolverOptions) -> Result<BnbResult, MipError> {
    solve_bnb_with_hint(p, opts, None)
}

/// Branch and bound. `hint` holds a full-length vector whose binary entries
/// seed the incumbent through one continuous restriction solve.
pub fn solve_bnb_with_hint(
    p: &MixedIntegerProgram,
    opts: &SolverOptions,
    hint: Option<&[f64]>,
) -> Result<BnbResult, MipError> {
    p.validate()?;
    opts.validate().map_err(MipError::Dimension)?;
    let start = Instant::now();
    let n = p.n();
    let bins = p.binary_indices();
    let tol = opts.feasibility_tol;
    let gap = |inc: f64| opts.gap_abs.max(opts.gap_rel * inc.abs());

    let mut incumbent: Option<Vec<f64>> = None;
    let mut inc_obj = f64::INFINITY;
    let mut explored = 0usize;
    let mut failures = 0usize;
    let mut records = Vec::new();
    let (groups, group_of) = one_hot_groups(p, &bins);
    let linear = p.h.is_empty();
    let vars: Rc<Vec<microlp::Variable>> = Rc::new(if linear {
        simplex_problem(p, &p.lb, &p.ub).1
    } else {
        Vec::new()
    });
    let relax = |lb: &[f64],
                 ub: &[f64],
                 fix: &[i8],
                 warm: Option<&Warm>|
     -> (Relaxation, Option<Rc<Warm>>) {
        if linear {
            match simplex_node(p, warm, &bins, fix, lb, ub) {
                (SimplexOutcome::Solved(r, sol), applied) => {
                    let w = Warm {
                        sol,
                        vars: Rc::clone(&vars),
                        fix: applied,
                    };
                    return (r, Some(Rc::new(w)));
                }
                (SimplexOutcome::Infeasible, _) => {
                    return (
                        Relaxation::failed(RelaxStatus::Infeasible, n, p.eq.len() + p.ineq.len()),
                        None,
                    );
                }
                (SimplexOutcome::Failed, _) => {}
            }
        }
        (relax_with_bounds(p, lb, ub, tol), None)
    };

    let bounds_for = |fix: &[i8]| -> (Vec<f64>, Vec<f64>) {
        let mut lb = p.lb.clone();
        let mut ub = p.ub.clone();
        for (k, &j) in bins.iter().enumerate() {
            match fix[k] {
                0 => ub[j] = 0.0,
                1 => lb[j] = 1.0,
                _ => {
                    lb[j] = lb[j].ceil();
                    ub[j] = ub[j].floor();
                }
            }
        }
        (lb, ub)
    };

    if let Some(h) = hint {
        if h.len() == n && !bins.is_empty() {
            let fix: Vec<i8> = bins
                .iter()
                .map(|&j| if h[j] >= 0.5 { 1 } else { 0 })
                .collect();
            let (lb, ub) = bounds_for(&fix);
            let (r, _) = relax(&lb, &ub, &fix, None);
            if r.status == RelaxStatus::Optimal {
                inc_obj = r.objective;
                incumbent = Some(r.x);
            }
        }
    }

    let mut heap = BinaryHeap::new();
    let mut root_warm: Option<Rc<Warm>> = None;
    let mut seq = 0u64;
    let mut dive: Option<Node> = Some(Node {
        fix: vec![-1; bins.len()],
        bound: f64::NEG_INFINITY,
        depth: 0,
        seq,
        warm: None,
    });
    let mut status = BnbStatus::Optimal;

    loop {
        let node = match dive.take() {
            Some(nd) => nd,
            None => match heap.pop() {
                Some(nd) => nd,
                None => break,
            },
        };
        if opts.prune && incumbent.is_some() && node.bound >= inc_obj - gap(inc_obj) {
            continue;
        }
        if explored >= opts.node_limit {
            heap.push(node);
            status = BnbStatus::NodeLimit;
            break;
        }
        if let Some(limit) = opts.time_limit {
            if start.elapsed().as_secs_f64() > limit {
                heap.push(node);
                status = BnbStatus::TimeLimit;
                break;
            }
        }

        let (mut lb, mut ub) = bounds_for(&node.fix);
        let mut fix = node.fix.clone();
        if opts.propagate && !propagate(p, &mut lb, &mut ub, tol) {
            continue;
        }
        for (k, &j) in bins.iter().enumerate() {
            if fix[k] < 0 && lb[j] == ub[j] {
                fix[k] = lb[j] as i8;
            }
        }
        let (r, warm) = relax(&lb, &ub, &fix, node.warm.as_deref());
        explored += 1;
        if node.depth == 0 && root_warm.is_none() {
            root_warm = warm.clone();
        }
        let node_bound = r.objective.max(node.bound);
        let mut record = |global: f64| {
            if opts.record_nodes {
                records.push(NodeRecord {
                    depth: node.depth,
                    relaxation: r.objective,
                    global_bound: global,
                    fixings: bins
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| node.fix[*k] >= 0)
                        .map(|(k, &j)| (j, node.fix[k] as u8))
                        .collect(),
                });
            }
        };
        match r.status {
            RelaxStatus::Optimal => {}
            RelaxStatus::NumericalFailure => {
                failures += 1;
                log::warn!("relaxation failed numerically at depth {}", node.depth);
                record(open_bound(&heap, &dive, inc_obj));
                continue;
            }
            _ => {
                record(open_bound(&heap, &dive, inc_obj));
                continue;
            }
        }
        if opts.prune && incumbent.is_some() && node_bound >= inc_obj - gap(inc_obj) {
            record(open_bound(&heap, &dive, inc_obj));
            continue;
        }
        match most_fractional(p, &bins, &r.x, opts) {
            None => {
                let candidate = if bins.is_empty() {
                    r.clone()
                } else if linear {
                    // a vertex with integral binaries is already optimal for its restriction
                    let mut x = r.x.clone();
                    bins.iter().for_each(|&j| x[j] = x[j].round());
                    Relaxation {
                        objective: p.objective(&x),
                        x,
                        ..r.clone()
                    }
                } else {
                    let fix_all: Vec<i8> = bins.iter().map(|&j| r.x[j].round() as i8).collect();
                    let (plb, pub_) = bounds_for(&fix_all);
                    let polished = relax_with_bounds(p, &plb, &pub_, tol);
                    if polished.status == RelaxStatus::Optimal {
                        polished
                    } else {
                        let mut x = r.x.clone();
                        bins.iter().for_each(|&j| x[j] = x[j].round());
                        Relaxation {
                            objective: p.objective(&x),
                            x,
                            ..r.clone()
                        }
                    }
                };
                if candidate.objective < inc_obj {
                    inc_obj = candidate.objective;
                    incumbent = Some(candidate.x);
                }
            }
            Some(j) => {
                let k = bins.iter().position(|&b| b == j).unwrap();
                let mut sides: Vec<Vec<(usize, i8)>> = match opts
                    .sos_branching
                    .then(|| split_group(&groups, group_of[k], &fix, &bins, &r.x))
                    .flatten()
                {
                    Some((head, tail)) => {
                        // each child zeroes one side of the ordered group; the heavier side is explored first
                        let mass = |ks: &[usize]| ks.iter().map(|&q| r.x[bins[q]]).sum::<f64>();
                        let keep_head: Vec<(usize, i8)> = tail.iter().map(|&q| (q, 0)).collect();
                        let keep_tail: Vec<(usize, i8)> = head.iter().map(|&q| (q, 0)).collect();
                        if mass(&head) >= mass(&tail) {
                            vec![keep_head, keep_tail]
                        } else {
                            vec![keep_tail, keep_head]
                        }
                    }
                    None if r.x[j] >= 0.5 => vec![vec![(k, 1)], vec![(k, 0)]],
                    None => vec![vec![(k, 0)], vec![(k, 1)]],
                };
                let mut children = Vec::with_capacity(2);
                for side in sides.drain(..) {
                    let mut f = fix.clone();
                    for (q, val) in side {
                        f[q] = val;
                    }
                    seq += 1;
                    children.push(Node {
                        fix: f,
                        bound: node_bound,
                        depth: node.depth + 1,
                        seq,
                        warm: warm.clone(),
                    });
                }
                let mut second = children.pop().unwrap();
                let first = children.pop().unwrap();
                // queued nodes restart from the root state so that open nodes
                // do not each hold a simplex factorization
                if heap.len() >= WARM_QUEUE_LIMIT {
                    second.warm = root_warm.clone();
                }
                heap.push(second);
                dive = Some(first);
            }
        }
        record(open_bound(&heap, &dive, inc_obj));
        if opts.node_selection == NodeSelection::DepthFirst && dive.is_none() {
            // depth-first takes the most recently pushed node
            let mut all: Vec<Node> = std::mem::take(&mut heap).into_vec();
            all.sort_by_key(|nd| nd.seq);
            dive = all.pop();
            heap = all.into_iter().collect();
        }
    }

    let open_min = heap.iter().map(|nd| nd.bound).fold(f64::INFINITY, f64::min);
    let best_bound = match status {
        BnbStatus::Optimal => inc_obj,
        _ => open_min.min(inc_obj),
    };
    let status = match (status, &incumbent) {
        (BnbStatus::Optimal, None) => BnbStatus::Infeasible,
        (s, _) => s,
    };
    Ok(BnbResult {
        status,
        incumbent,
        objective: inc_obj,
        best_bound,
        explored_nodes: explored,
        wall_time: start.elapsed().as_secs_f64(),
        numerical_failures: failures,
        nodes: records,
    })
}

/// Maximum binaries accepted by [`brute_force_binaries`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Enumerate every binary assignment and solve the continuous restriction.
pub fn brute_force_binaries(p: &MixedIntegerProgram) -> Result<BnbResult, MipError> {
    p.validate()?;
    let start = Instant::now();
    let bins = p.binary_indices();
    if bins.len() > BRUTE_FORCE_LIMIT {
        return Err(MipError::TooManyBinaries(bins.len(), BRUTE_FORCE_LIMIT));
    }
    let mut best: Option<Relaxation> = None;
    let mut solves = 0;
    for mask in 0u64..(1u64 << bins.len()) {
        let mut lb = p.lb.clone();
        let mut ub = p.ub.clone();
        for (k, &j) in bins.iter().enumerate() {
            let v = ((mask >> k) & 1) as f64;
            lb[j] = v;
            ub[j] = v;
        }
        // Assignments outside the binaries' own bounds are not candidates.
        if bins.iter().any(|&j| lb[j] < p.lb[j] || ub[j] > p.ub[j]) {
            continue;
        }
        let r = relax_with_bounds(p, &lb, &ub, 1e-7);
        solves += 1;
        if r.status == RelaxStatus::Optimal
            && best.as_ref().map_or(true, |b| r.objective < b.objective)
        {
            best = Some(r);
        }
    }
    let (status, objective, incumbent) = match best {
        Some(r) => (BnbStatus::Optimal, r.objective, Some(r.x)),
        None => (BnbStatus::Infeasible, f64::INFINITY, None),
    };
    Ok(BnbResult {
        status,
        incumbent,
        objective,
        best_bound: objective,
        explored_nodes: solves,
        wall_time: start.elapsed().as_secs_f64(),
        numerical_failures: 0,
        nodes: Vec::new(),
    })
}

fn lp_name(raw: &str, j: usize) -> String {
    let mut s: String = raw
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let bad_start = s.chars().next().map_or(true, |c| {
        c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E'
    });
    if bad_start {
        s = format!("v{j}_{s}");
    }
    s
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

fn write_terms(out: &mut String, terms: impl Iterator<Item = (f64, String)>) -> bool {
    let mut any = false;
    for (a, name) in terms {
        if a == 0.0 {
            continue;
        }
        let sign = if a < 0.0 { '-' } else { '+' };
        let _ = write!(out, " {sign} {} {name}", fmt_num(a.abs()));
        any = true;
    }
    any
}

/// Emit the program in CPLEX LP text format.
pub fn export_lp_file(p: &MixedIntegerProgram) -> String {
    let mut seen = std::collections::HashSet::new();
    let names: Vec<String> = (0..p.n())
        .map(|j| {
            let mut name = lp_name(&p.names[j], j);
            if !seen.insert(name.clone()) {
                name = format!("{name}_{j}");
                seen.insert(name.clone());
            }
            name
        })
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "\\ {} variables, {} binaries", p.n(), p.n_binaries());
    out.push_str("Minimize\n obj:");
    let mut any = write_terms(
        &mut out,
        p.c.iter().enumerate().map(|(j, &a)| (a, names[j].clone())),
    );
    let h = p.h_merged();
    if !h.is_empty() {
        out.push_str(" + [");
        for (i, j, v) in &h {
            let (coef, term) = if i == j {
                (*v, format!("{} ^ 2", names[*i]))
            } else {
                (2.0 * v, format!("{} * {}", names[*i], names[*j]))
            };
            let sign = if coef < 0.0 { '-' } else { '+' };
            let _ = write!(out, " {sign} {} {term}", fmt_num(coef.abs()));
        }
        out.push_str(" ] / 2");
        any = true;
    }
    if p.offset != 0.0 || !any {
        let sign = if p.offset < 0.0 { '-' } else { '+' };
        let _ = write!(out, " {sign} {}", fmt_num(p.offset.abs()));
    }
    out.push_str("\nSubject To\n");
    let mut row = |prefix: &str, r: usize, lr: &LinRow, op: &str| {
        let _ = write!(out, " {prefix}{r}:");
        if !write_terms(
            &mut out,
            lr.coefs.iter().map(|&(j, a)| (a, names[j].clone())),
        ) {
            let _ = write!(
                out,
                " 0 {}",
                names.first().map(String::as_str).unwrap_or("x")
            );
        }
        let _ = writeln!(out, " {op} {}", fmt_num(lr.rhs));
    };
    for (r, lr) in p.eq.iter().enumerate() {
        row("e", r, lr, "=");
    }
    for (r, lr) in p.ineq.iter().enumerate() {
        row("c", r, lr, "<=");
    }
    out.push_str("Bounds\n");
    for j in 0..p.n() {
        let (lo, hi) = (p.lb[j], p.ub[j]);
        if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
            let _ = writeln!(out, " {} free", names[j]);
        } else {
            let _ = writeln!(out, " {} <= {} <= {}", fmt_num(lo), names[j], fmt_num(hi));
        }
    }
    let bins = p.binary_indices();
    if !bins.is_empty() {
        out.push_str("Binaries\n");
        for j in bins {
            let _ = writeln!(out, " {}", names[j]);
        }
    }
    out.push_str("End\n");
    out
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Op(String),
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, MipError> {
    let mut toks = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('\\').next().unwrap_or("");
        let chars: Vec<char> = content.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if "<>=".contains(c) {
                let mut op = c.to_string();
                if i + 1 < chars.len() && "<>=".contains(chars[i + 1]) {
                    op.push(chars[i + 1]);
                    i += 1;
                }
                let op = match op.as_str() {
                    "<" | "<=" | "=<" => "<=",
                    ">" | ">=" | "=>" => ">=",
                    "=" => "=",
                    other => {
                        return Err(MipError::Parse {
                            line,
                            msg: format!("unknown operator {other}"),
                        })
                    }
                };
                toks.push((Tok::Op(op.into()), line));
                i += 1;
            } else if "+-:[]/^*".contains(c) {
                toks.push((Tok::Op(c.to_string()), line));
                i += 1;
            } else if c.is_ascii_digit() || c == '.' {
                let s = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut k = i + 1;
                    if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        i = k;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s: String = chars[s..i].iter().collect();
                let v = s.parse::<f64>().map_err(|_| MipError::Parse {
                    line,
                    msg: format!("bad number {s}"),
                })?;
                toks.push((Tok::Num(v), line));
            } else {
                let s = i;
                while i < chars.len()
                    && !chars[i].is_whitespace()
                    && !"<>=+-:[]/^*".contains(chars[i])
                {
                    i += 1;
                }
                let s: String = chars[s..i].iter().collect();
                let lower = s.to_ascii_lowercase();
                if lower == "inf" || lower == "infinity" {
                    toks.push((Tok::Num(f64::INFINITY), line));
                } else {
                    toks.push((Tok::Name(s), line));
                }
            }
        }
        toks.push((Tok::Op("\n".into()), line));
    }
    Ok(toks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    None,
    Objective,
    Constraints,
    Bounds,
    Binaries,
    End,
}

fn section_keyword(line_toks: &[&Tok]) -> Option<(Section, bool)> {
    let words: Vec<String> = line_toks
        .iter()
        .map(|t| match t {
            Tok::Name(s) => s.to_ascii_lowercase(),
            Tok::Op(o) => o.clone(),
            Tok::Num(_) => "#".into(),
        })
        .collect();
    let joined = words.join(" ");
    match joined.as_str() {
        "minimize" | "minimise" | "minimum" | "min" => Some((Section::Objective, false)),
        "maximize" | "maximise" | "maximum" | "max" => Some((Section::Objective, true)),
        "subject to" | "such that" | "st" | "s.t." => Some((Section::Constraints, false)),
        "bounds" | "bound" => Some((Section::Bounds, false)),
        "binaries" | "binary" | "bin" => Some((Section::Binaries, false)),
        "end" => Some((Section::End, false)),
        "general" | "generals" | "gen" => Some((Section::None, false)),
        _ => None,
    }
}

struct LpBuilder {
    index: HashMap<String, usize>,
    order: Vec<String>,
}

impl LpBuilder {
    fn var(&mut self, name: &str) -> usize {
        if let Some(&j) = self.index.get(name) {
            return j;
        }
        self.order.push(name.to_string());
        self.index.insert(name.to_string(), self.order.len() - 1);
        self.order.len() - 1
    }
}

type Expr = (Vec<(usize, f64)>, Vec<(usize, usize, f64)>, f64);

fn parse_expr(b: &mut LpBuilder, toks: &[(Tok, usize)]) -> Result<Expr, MipError> {
    let mut lin = Vec::new();
    let mut quad = Vec::new();
    let mut constant = 0.0;
    let mut i = 0;
    let err = |line: usize, msg: &str| MipError::Parse {
        line,
        msg: msg.into(),
    };
    let mut in_bracket = false;
    let mut bracket_start = 0;
    while i < toks.len() {
        let line = toks[i].1;
        let mut sign = 1.0;
        let mut saw_sign = false;
        while let Some((Tok::Op(o), _)) = toks.get(i) {
            match o.as_str() {
                "+" => {}
                "-" => sign = -sign,
                _ => break,
            }
            saw_sign = true;
            i += 1;
        }
        let _ = saw_sign;
        match toks.get(i) {
            Some((Tok::Op(o), _)) if o == "[" => {
                in_bracket = true;
                bracket_start = quad.len();
                i += 1;
                continue;
            }
            Some((Tok::Op(o), l)) if o == "]" => {
                if !in_bracket {
                    return Err(err(*l, "unmatched ]"));
                }
                in_bracket = false;
                i += 1;
                if let (Some((Tok::Op(s), _)), Some((Tok::Num(d), _))) =
                    (toks.get(i), toks.get(i + 1))
                {
                    if s == "/" {
                        for q in &mut quad[bracket_start..] {
                            let q: &mut (usize, usize, f64) = q;
                            q.2 /= *d;
                        }
                        i += 2;
                    }
                }
                continue;
            }
            _ => {}
        }
        let mut coef = sign;
        if let Some((Tok::Num(v), _)) = toks.get(i) {
            coef *= v;
            i += 1;
        }
        match toks.get(i) {
            Some((Tok::Name(name), _)) => {
                let a = b.var(name);
                i += 1;
                match toks.get(i) {
                    Some((Tok::Op(o), l)) if o == "^" => {
                        match toks.get(i + 1) {
                            Some((Tok::Num(p), _)) if *p == 2.0 => {}
                            _ => return Err(err(*l, "only squares are supported")),
                        }
                        if !in_bracket {
                            return Err(err(*l, "quadratic term outside brackets"));
                        }
                        quad.push((a, a, coef));
                        i += 2;
                    }
                    Some((Tok::Op(o), l)) if o == "*" => {
                        let other = match toks.get(i + 1) {
                            Some((Tok::Name(n2), _)) => b.var(n2),
                            _ => return Err(err(*l, "expected variable after *")),
                        };
                        if !in_bracket {
                            return Err(err(*l, "quadratic term outside brackets"));
                        }
                        quad.push((a, other, coef));
                        i += 2;
                    }
                    _ => lin.push((a, coef)),
                }
            }
            _ => {
                if coef.is_finite() && matches!(toks.get(i - 1), Some((Tok::Num(_), _))) {
                    constant += coef;
                } else {
                    return Err(err(line, "expected a term"));
                }
            }
        }
    }
    if in_bracket {
        return Err(err(toks.last().map_or(0, |t| t.1), "unclosed ["));
    }
    Ok((lin, quad, constant))
}

/// Parse CPLEX LP text produced by [`export_lp_file`] or common solvers.
/// Variable order follows the Bounds section, then first appearance.
pub fn parse_lp_file(text: &str) -> Result<MixedIntegerProgram, MipError> {
    let toks = tokenize(text)?;
    let lines: Vec<Vec<(Tok, usize)>> = toks
        .split(|t| t.0 == Tok::Op("\n".into()))
        .map(|l| l.to_vec())
        .filter(|l| !l.is_empty())
        .collect();
    let mut section = Section::None;
    let mut maximize = false;
    let mut chunks: Vec<(Section, Vec<(Tok, usize)>)> = Vec::new();
    for l in lines {
        let refs: Vec<&Tok> = l.iter().map(|t| &t.0).collect();
        if let Some((s, max)) = section_keyword(&refs) {
            if s == Section::Objective {
                maximize = max;
            }
            section = s;
            continue;
        }
        if section == Section::None {
            return Err(MipError::Parse {
                line: l[0].1,
                msg: "content outside a section".into(),
            });
        }
        chunks.push((section, l));
    }

    let mut b = LpBuilder {
        index: HashMap::new(),
        order: Vec::new(),
    };
    // Bounds section first fixes the variable order.
    let mut bounds: Vec<(usize, Option<f64>, Option<f64>)> = Vec::new();
    for (s, l) in &chunks {
        if *s != Section::Bounds {
            continue;
        }
        let line = l[0].1;
        let err = |msg: &str| MipError::Parse {
            line,
            msg: msg.into(),
        };
        let num = |t: &[(Tok, usize)]| -> Option<(f64, usize)> {
            match t {
                [(Tok::Op(s), _), (Tok::Num(v), _), ..] if s == "-" => Some((-v, 2)),
                [(Tok::Op(s), _), (Tok::Num(v), _), ..] if s == "+" => Some((*v, 2)),
                [(Tok::Num(v), _), ..] => Some((*v, 1)),
                _ => None,
            }
        };
        match num(l) {
            Some((lo, k)) => {
                // lo <= x [<= hi]
                let (op1, name) = match (&l.get(k), &l.get(k + 1)) {
                    (Some((Tok::Op(o), _)), Some((Tok::Name(n), _))) => (o.clone(), n.clone()),
                    _ => return Err(err("malformed bound")),
                };
                let j = b.var(&name);
                let mut entry = (j, None, None);
                match op1.as_str() {
                    "<=" => entry.1 = Some(lo),
                    ">=" => entry.2 = Some(lo),
                    "=" => {
                        entry.1 = Some(lo);
                        entry.2 = Some(lo);
                    }
                    _ => return Err(err("malformed bound")),
                }
                if let Some((Tok::Op(op2), _)) = l.get(k + 2) {
                    let (hi, _) = num(&l[k + 3..]).ok_or_else(|| err("missing bound value"))?;
                    match op2.as_str() {
                        "<=" => entry.2 = Some(hi),
                        ">=" => entry.1 = Some(hi),
                        _ => return Err(err("malformed bound")),
                    }
                }
                bounds.push(entry);
            }
            None => {
                let name = match &l[0].0 {
                    Tok::Name(n) => n.clone(),
                    _ => return Err(err("malformed bound")),
                };
                let j = b.var(&name);
                match l.get(1) {
                    Some((Tok::Name(w), _)) if w.eq_ignore_ascii_case("free") => {
                        bounds.push((j, Some(f64::NEG_INFINITY), Some(f64::INFINITY)))
                    }
                    Some((Tok::Op(o), _)) => {
                        let (v, _) = num(&l[2..]).ok_or_else(|| err("missing bound value"))?;
                        bounds.push(match o.as_str() {
                            "<=" => (j, None, Some(v)),
                            ">=" => (j, Some(v), None),
                            "=" => (j, Some(v), Some(v)),
                            _ => return Err(err("malformed bound")),
                        });
                    }
                    _ => return Err(err("malformed bound")),
                }
            }
        }
    }

    let mut p = MixedIntegerProgram::new();
    let mut obj: Option<Expr> = None;
    let mut rows: Vec<(Vec<(usize, f64)>, String, f64)> = Vec::new();
    let mut binaries = Vec::new();
    let mut pending: Vec<(Tok, usize)> = Vec::new();
    let mut objective_toks: Vec<(Tok, usize)> = Vec::new();
    for (s, l) in &chunks {
        match s {
            Section::Objective => objective_toks.extend(l.iter().cloned()),
            Section::Constraints => {
                pending.extend(l.iter().cloned());
                // a constraint ends with an operator followed by a (signed) number
                loop {
                    let op_pos = pending.iter().position(
                        |t| matches!(&t.0, Tok::Op(o) if o == "<=" || o == ">=" || o == "="),
                    );
                    let Some(op_pos) = op_pos else { break };
                    let mut k = op_pos + 1;
                    let mut sign = 1.0;
                    while let Some((Tok::Op(o), _)) = pending.get(k) {
                        if o == "-" {
                            sign = -sign;
                        } else if o != "+" {
                            break;
                        }
                        k += 1;
                    }
                    let rhs = match pending.get(k) {
                        Some((Tok::Num(v), _)) => sign * v,
                        Some((_, line)) => {
                            return Err(MipError::Parse {
                                line: *line,
                                msg: "right-hand side must be a number".into(),
                            })
                        }
                        None => break,
                    };
                    let mut body: Vec<(Tok, usize)> = pending.drain(..=k).collect();
                    let op = match &body[op_pos].0 {
                        Tok::Op(o) => o.clone(),
                        _ => unreachable!(),
                    };
                    body.truncate(op_pos);
                    if body.len() >= 2 && body[1].0 == Tok::Op(":".into()) {
                        body.drain(..2);
                    }
                    let (lin, quad, constant) = parse_expr(&mut b, &body)?;
                    if !quad.is_empty() {
                        return Err(MipError::Parse {
                            line: body[0].1,
                            msg: "quadratic constraints are not supported".into(),
                        });
                    }
                    rows.push((lin, op, rhs - constant));
                }
            }
            Section::Binaries => {
                for (t, line) in l {
                    match t {
                        Tok::Name(n) => binaries.push(b.var(n)),
                        _ => {
                            return Err(MipError::Parse {
                                line: *line,
                                msg: "expected variable name".into(),
                            })
                        }
                    }
                }
            }
            _ => {}
        }
    }
    if let Some((_, line)) = pending.first() {
        return Err(MipError::Parse {
            line: *line,
            msg: "incomplete constraint".into(),
        });
    }
    if !objective_toks.is_empty() {
        let mut body = objective_toks;
        if body.len() >= 2 && body[1].0 == Tok::Op(":".into()) {
            body.drain(..2);
        }
        obj = Some(parse_expr(&mut b, &body)?);
    }

    for name in &b.order {
        p.add_var(0.0, f64::INFINITY, 0.0, name.clone());
    }
    if let Some((lin, quad, constant)) = obj {
        let s = if maximize { -1.0 } else { 1.0 };
        for (j, a) in lin {
            p.c[j] += s * a;
        }
        for (i, j, a) in quad {
            // coefficient of x_i x_j in the objective equals H_ij (i != j) or H_ii / 2
            if i == j {
                p.add_quad(i, i, 2.0 * s * a);
            } else {
                p.add_quad(i, j, s * a);
            }
        }
        p.offset = s * constant;
    }
    for (coefs, op, rhs) in rows {
        match op.as_str() {
            "<=" => p.add_le(coefs, rhs),
            ">=" => p.add_ge(coefs, rhs),
            _ => p.add_eq(coefs, rhs),
        }
    }
    for j in binaries {
        p.binary[j] = true;
        p.lb[j] = 0.0;
        p.ub[j] = 1.0;
    }
    for (j, lo, hi) in bounds {
        if let Some(lo) = lo {
            p.lb[j] = lo;
        }
        if let Some(hi) = hi {
            p.ub[j] = hi;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_dimensional_box() {
        let mut p = MixedIntegerProgram::new();
        let x = p.add_var(f64::NEG_INFINITY, f64::INFINITY, 1.0, "x");
        p.add_ge(vec![(x, 1.0)], 3.0);
        p.add_le(vec![(x, 1.0)], 5.0);
        let r = solve_relaxation(&p).unwrap();
        assert_eq!(r.status, RelaxStatus::Optimal);
        assert_abs_diff_eq!(r.x[0], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.objective, 3.0, epsilon = 1e-6);
    }

    #[test]
    fn textbook_lp_face() {
        let mut p = MixedIntegerProgram::new();
        let x = p.add_var(0.0, 1.0, -1.0, "x");
        let y = p.add_var(0.0, 1.0, -1.0, "y");
        p.add_le(vec![(x, 1.0), (y, 1.0)], 1.0);
        let r = solve_relaxation(&p).unwrap();
        assert_abs_diff_eq!(r.objective, -1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(r.x[0] + r.x[1], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut p = MixedIntegerProgram::new();
        let x = p.add_var(0.0, 1.0, 1.0, "x");
        p.add_ge(vec![(x, 1.0)], 2.0);
        assert_eq!(
            solve_relaxation(&p).unwrap().status,
            RelaxStatus::Infeasible
        );
        let mut q = MixedIntegerProgram::new();
        q.add_var(f64::NEG_INFINITY, f64::INFINITY, 1.0, "x");
        q.add_le(vec![(0, 1.0)], 0.0);
        assert_eq!(solve_relaxation(&q).unwrap().status, RelaxStatus::Unbounded);
    }

    #[test]
    fn continuous_problem_is_one_node() {
        let mut p = MixedIntegerProgram::new();
        let x = p.add_var(-5.0, 5.0, 0.0, "x");
        p.add_square(&[(x, 1.0)], -2.0, 1.0);
        let r = solve_bnb(&p, &SolverOptions::default()).unwrap();
        assert_eq!(r.explored_nodes, 1);
        assert_abs_diff_eq!(r.incumbent.unwrap()[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.objective, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn small_knapsack() {
        // max 5a + 4b + 3c  s.t. 2a + 3b + c <= 5 ; 4a + b + 2c <= 11 ; 3a + 4b + 2c <= 8
        let mut p = MixedIntegerProgram::new();
        let v: Vec<usize> = [5.0, 4.0, 3.0]
            .iter()
            .map(|c| p.add_binary(-c, "b"))
            .collect();
        p.add_le(vec![(v[0], 2.0), (v[1], 3.0), (v[2], 1.0)], 5.0);
        p.add_le(vec![(v[0], 4.0), (v[1], 1.0), (v[2], 2.0)], 11.0);
        p.add_le(vec![(v[0], 3.0), (v[1], 4.0), (v[2], 2.0)], 8.0);
        let r = solve_bnb(&p, &SolverOptions::default()).unwrap();
        let bf = brute_force_binaries(&p).unwrap();
        assert_eq!(r.status, BnbStatus::Optimal);
        assert_abs_diff_eq!(r.objective, -9.0, epsilon = 1e-6);
        assert_abs_diff_eq!(bf.objective, -9.0, epsilon = 1e-6);
        assert_eq!(bf.explored_nodes, 8);
    }

    #[test]
    fn infeasible_for_every_assignment() {
        let mut p = MixedIntegerProgram::new();
        let a = p.add_binary(0.0, "a");
        let b = p.add_binary(0.0, "b");
        p.add_eq(vec![(a, 1.0), (b, 1.0)], 1.5);
        assert_eq!(
            brute_force_binaries(&p).unwrap().status,
            BnbStatus::Infeasible
        );
        assert_eq!(
            solve_bnb(&p, &SolverOptions::default()).unwrap().status,
            BnbStatus::Infeasible
        );
    }

    #[test]
    fn psd_check() {
        let mut p = MixedIntegerProgram::new();
        p.add_var(-1.0, 1.0, 0.0, "x");
        p.add_var(-1.0, 1.0, 0.0, "y");
        p.add_quad(0, 0, 1.0);
        p.add_quad(1, 1, 1.0);
        p.add_quad(0, 1, 1.0);
        assert!(p.h_is_psd());
        p.add_quad(0, 1, 0.5);
        assert!(!p.h_is_psd());
        assert_eq!(p.validate(), Err(MipError::NotPsd));
    }

    #[test]
    fn binary_bounds_checked() {
        let mut p = MixedIntegerProgram::new();
        let j = p.add_binary(1.0, "b");
        p.ub[j] = 2.0;
        assert_eq!(p.validate(), Err(MipError::BinaryBounds(0)));
    }

    #[test]
    fn too_many_binaries() {
        let mut p = MixedIntegerProgram::new();
        for _ in 0..21 {
            p.add_binary(1.0, "b");
        }
        assert!(matches!(
            brute_force_binaries(&p),
            Err(MipError::TooManyBinaries(21, 20))
        ));
    }

    #[test]
    fn lp_round_trip_with_quadratic() {
        let mut p = MixedIntegerProgram::new();
        let x = p.add_var(-3.0, 4.0, 1.5, "x[0]");
        let y = p.add_var(f64::NEG_INFINITY, f64::INFINITY, -2.0, "y");
        let b = p.add_binary(0.7, "b");
        p.add_square(&[(x, 1.0), (y, -1.0)], 0.5, 2.0);
        p.add_le(vec![(x, 1.0), (b, -3.0)], 1.0);
        p.add_eq(vec![(y, 1.0), (x, 0.5)], 0.25);
        let text = export_lp_file(&p);
        let q = parse_lp_file(&text).unwrap();
        assert_eq!(q.n(), p.n());
        assert_eq!(q.binary, p.binary);
        assert_eq!(q.lb, p.lb);
        assert_eq!(q.ub, p.ub);
        let rp = solve_bnb(&p, &SolverOptions::default()).unwrap();
        let rq = solve_bnb(&q, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(rp.objective, rq.objective, epsilon = 1e-6);
        let probe = [0.3, -1.2, 1.0];
        assert_abs_diff_eq!(p.objective(&probe), q.objective(&probe), epsilon = 1e-12);
    }

    #[test]
    fn lp_binary_section_lists_masked_variables() {
        let mut p = MixedIntegerProgram::new();
        p.add_var(0.0, 1.0, 1.0, "x");
        p.add_binary(1.0, "b1");
        p.add_binary(1.0, "b2");
        let text = export_lp_file(&p);
        let section: Vec<&str> = text
            .lines()
            .skip_while(|l| *l != "Binaries")
            .skip(1)
            .take_while(|l| *l != "End")
            .map(str::trim)
            .collect();
        assert_eq!(section, vec!["b1", "b2"]);
    }

    #[test]
    fn parser_reports_line_numbers() {
        let text = "Minimize\n obj: x + y\nSubject To\n c1: x + y <= z\nEnd\n";
        match parse_lp_file(text) {
            Err(MipError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parser_accepts_common_forms() {
        let text = "\\ comment\nMaximize\n obj: 3 x + 2 y\nSubject To\n c1: x + y <= 4\n c2: x + 3 y\n   <= 6\n c3: x >= -1\nBounds\n x <= 3\n y >= 0\nEnd\n";
        let p = parse_lp_file(text).unwrap();
        assert_eq!(p.n(), 2);
        assert_eq!(p.ineq.len(), 3);
        let r = solve_relaxation(&p).unwrap();
        assert_abs_diff_eq!(r.objective, -11.0, epsilon = 1e-6);
    }
}
