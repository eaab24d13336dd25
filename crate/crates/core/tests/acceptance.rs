//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::time::Instant;

use platoon::cli::{parse_config, read_summary, run_matrix, ManifestRow, RunRole};
use platoon::controllers::{
    admm_step, centralized_step, decentralized_step, event_based_step, sequential_step,
    AdmmBinaries, CommBus, ControllerKind, ControllerState, EventThreshold,
};
use platoon::mip::{
    brute_force_binaries, solve_bnb, solve_relaxation, MixedIntegerProgram, RelaxStatus,
    SolverOptions,
};
use platoon::mld::{build_mld_model1, mld_simulate, ModelKind};
use platoon::models::{build_pwa_model, steady_throttle, step_model1, State};
use platoon::mpc::{build_centralized, NormKind, PlatoonConfig};
use platoon::sim::{
    certify_mass_bound, feasibility_mass_bound, mean_std, reference_trajectory, run_simulation,
    MassBoundProblem, MassBoundReading, RunSetup, Task, DEFAULT_K_SIM, ORACLE_POINTS,
    REPORTED_MASS_BOUND,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::random_mip;

type Outcome = Result<String, String>;

fn solver() -> SolverOptions {
    SolverOptions {
        sos_branching: true,
        ..SolverOptions::default()
    }
}

/// Solver settings whose optimality gap is far below the criterion tolerances.
fn exact_solver() -> SolverOptions {
    SolverOptions {
        gap_rel: 1e-12,
        gap_abs: 1e-10,
        ..solver()
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Controller configuration, initial states and reference window of a
/// randomized task instance.
fn instance(
    task: u8,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<(PlatoonConfig, Vec<State>, Vec<State>), String> {
    let setup = RunSetup::new(
        Task::standard(task).map_err(err)?,
        ControllerKind::Centralized,
        m,
        n,
        seed,
    );
    let cfg = setup.platoon_config().map_err(err)?;
    let reference = reference_trajectory(&setup.task.reference, &cfg, seed, n + 1);
    Ok((cfg, setup.initial().map_err(err)?, reference))
}

fn binary_counts() -> Outcome {
    let mut counts = Vec::new();
    for (model, expected) in [(ModelKind::PwaGear, 105), (ModelKind::DiscreteGear, 120)] {
        let cfg = PlatoonConfig {
            model,
            horizon: 5,
            ..PlatoonConfig::default()
        }
        .with_size(3);
        let states: Vec<State> = (0..3).map(|i| State::new(-50.0 * i as f64, 20.0)).collect();
        let reference: Vec<State> = (0..=5).map(|k| State::new(20.0 * k as f64, 20.0)).collect();
        let problem = build_centralized(&cfg, &states, &reference).map_err(err)?;
        let got = problem.mip.n_binaries();
        check(
            got == expected,
            format!("{}: {got} binaries, expected {expected}", model.label()),
        )?;
        counts.push(got);
    }
    Ok(format!("{} and {} binaries", counts[0], counts[1]))
}

fn mld_equivalence() -> Outcome {
    let cfg = PlatoonConfig::default();
    let pwa = build_pwa_model(&cfg.vehicles[0], &cfg.gears, &cfg.friction).map_err(err)?;
    let mld = build_mld_model1(&pwa, &cfg.bounds, cfg.dt).map_err(err)?;
    let b = cfg.bounds;
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = State::new(
            r.gen_range(b.p_min..=b.p_max),
            r.gen_range(b.v_min..=b.v_max),
        );
        let u = r.gen_range(-b.u_max..=b.u_max);
        let (a, _) = step_model1(&pwa, x, u, cfg.dt).map_err(err)?;
        let m = mld_simulate(&mld, x, u, None).map_err(err)?;
        worst = worst
            .max((a.position - m.position).abs())
            .max((a.velocity - m.velocity).abs());
    }
    check(worst <= 1e-6, format!("largest deviation {worst:e}"))?;
    Ok(format!("largest deviation {worst:.1e} over 1000 points"))
}

/// Small boxed LP over three variables with random rows.
fn random_lp(seed: u64) -> MixedIntegerProgram {
    let mut r = rng(1000 + seed);
    let mut p = MixedIntegerProgram::new();
    let vars: Vec<usize> = (0..3)
        .map(|i| {
            p.add_var(
                r.gen_range(-5.0..-1.0),
                r.gen_range(1.0..5.0),
                r.gen_range(-3.0..3.0),
                format!("x{i}"),
            )
        })
        .collect();
    for _ in 0..4 {
        let row = vars.iter().map(|&j| (j, r.gen_range(-3.0..3.0))).collect();
        p.add_le(row, r.gen_range(-1.0..4.0));
    }
    p
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-10 {
        return None;
    }
    let mut x = [0.0; 3];
    for (c, xc) in x.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][c] = b[row];
        }
        *xc = det(m) / d;
    }
    Some(x)
}

/// Best objective over the basic feasible points, `None` when there is none.
fn vertex_oracle(p: &MixedIntegerProgram) -> Option<f64> {
    let mut rows: Vec<([f64; 3], f64)> = p
        .ineq
        .iter()
        .map(|row| {
            let mut a = [0.0; 3];
            row.coefs.iter().for_each(|&(j, v)| a[j] += v);
            (a, row.rhs)
        })
        .collect();
    for j in 0..3 {
        let mut e = [0.0; 3];
        e[j] = 1.0;
        rows.push((e, p.ub[j]));
        rows.push(([-e[0], -e[1], -e[2]], -p.lb[j]));
    }
    let mut best: Option<f64> = None;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            for k in j + 1..rows.len() {
                let Some(x) = solve3(
                    [rows[i].0, rows[j].0, rows[k].0],
                    [rows[i].1, rows[j].1, rows[k].1],
                ) else {
                    continue;
                };
                let feasible = rows.iter().all(|(a, b)| {
                    a[0] * x[0] + a[1] * x[1] + a[2] * x[2] <= b + 1e-9 * (1.0 + b.abs())
                });
                if feasible {
                    let obj = p.objective(&x);
                    best = Some(best.map_or(obj, |v: f64| v.min(obj)));
                }
            }
        }
    }
    best
}

fn solver_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut infeasible = 0;
    for (count, quadratic, offset) in [(50u64, false, 0u64), (20, true, 100)] {
        for s in 0..count {
            let p = random_mip(offset + s, 4 + (s % 5) as usize, quadratic);
            let bnb = solve_bnb(&p, &solver()).map_err(err)?;
            let oracle = brute_force_binaries(&p).map_err(err)?;
            match (&bnb.incumbent, &oracle.incumbent) {
                (None, None) => infeasible += 1,
                (Some(_), Some(_)) => {
                    let d = (bnb.objective - oracle.objective).abs();
                    worst = worst.max(d);
                    check(
                        d <= 1e-6,
                        format!(
                            "program {} (quadratic {quadratic}): {} vs {}",
                            offset + s,
                            bnb.objective,
                            oracle.objective
                        ),
                    )?;
                }
                _ => {
                    return Err(format!(
                        "program {}: feasibility disagrees with enumeration",
                        offset + s
                    ))
                }
            }
        }
    }
    let mut lp_worst: f64 = 0.0;
    for s in 0..50 {
        let p = random_lp(s);
        let relax = solve_relaxation(&p).map_err(err)?;
        match vertex_oracle(&p) {
            None => check(
                relax.status == RelaxStatus::Infeasible,
                format!("LP {s}: {:?} but no vertex", relax.status),
            )?,
            Some(v) => {
                check(
                    relax.status == RelaxStatus::Optimal,
                    format!("LP {s}: {:?}", relax.status),
                )?;
                let d = (relax.objective - v).abs();
                lp_worst = lp_worst.max(d);
                check(
                    d <= 1e-6,
                    format!("LP {s}: {} vs vertex {v}", relax.objective),
                )?;
            }
        }
    }
    Ok(format!(
        "70 programs ({infeasible} infeasible) within {worst:.1e}; 50 LPs within {lp_worst:.1e}"
    ))
}

fn model_ordering() -> Outcome {
    let mut r = rng(4);
    let mut worst = f64::INFINITY;
    for inst in 0..20 {
        let v0 = r.gen_range(6.0..40.0);
        let p0 = r.gen_range(-20.0..20.0);
        let vr = r.gen_range(8.0..38.0);
        let mass = r.gen_range(700.0..1000.0);
        let reference: Vec<State> = (0..=3).map(|k| State::new(vr * k as f64, vr)).collect();
        let mut costs = Vec::new();
        for model in [ModelKind::PwaGear, ModelKind::DiscreteGear] {
            let mut cfg = PlatoonConfig {
                model,
                norm: NormKind::One,
                horizon: 3,
                ..PlatoonConfig::default()
            }
            .with_size(1);
            cfg.vehicles[0].mass = mass;
            let problem =
                build_centralized(&cfg, &[State::new(p0, v0)], &reference).map_err(err)?;
            let res = solve_bnb(&problem.mip, &exact_solver()).map_err(err)?;
            check(
                res.incumbent.is_some(),
                format!("instance {inst}: {} infeasible", model.label()),
            )?;
            costs.push(res.objective);
        }
        let margin = costs[0] - costs[1];
        worst = worst.min(margin);
        check(
            margin >= -1e-6,
            format!(
                "instance {inst}: Model I {} below Model II {}",
                costs[0], costs[1]
            ),
        )?;
    }
    Ok(format!("smallest cost(I) - cost(II) = {worst:.3e}"))
}

fn steady_state() -> Outcome {
    let cfg = PlatoonConfig::default();
    let pwa = build_pwa_model(&cfg.vehicles[0], &cfg.gears, &cfg.friction).map_err(err)?;
    let (lo, hi) = (pwa.v_min(), pwa.v_max());
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let v = lo + (hi - lo) * i as f64 / 199.0;
        let u = steady_throttle(&pwa, v).map_err(err)?;
        let (next, _) = step_model1(&pwa, State::new(0.0, v), u, cfg.dt).map_err(err)?;
        worst = worst.max((next.velocity - v).abs());
    }
    check(worst <= 1e-9, format!("fixed-point residual {worst:e}"))?;

    let problem = MassBoundProblem::from_config(&cfg);
    let bound =
        feasibility_mass_bound(&problem, MassBoundReading::DynamicsConsistent).map_err(err)?;
    let Some(bound) = bound else {
        let failure = problem
            .first_failure(cfg.vehicles[0].mass, ORACLE_POINTS)
            .map_err(err)?;
        return Err(format!(
            "fixed point holds (residual {worst:.1e}), but no mass admits a throttle in (0, u_max] on the whole range; \
             at {} kg the first failure is at v = {:.3} m/s",
            cfg.vehicles[0].mass,
            failure.unwrap_or(f64::NAN)
        ));
    };
    for mass in [bound, 1.5 * bound, 10.0 * bound] {
        let mut vehicle = cfg.vehicles[0];
        vehicle.mass = mass;
        let pwa = build_pwa_model(&vehicle, &cfg.gears, &cfg.friction).map_err(err)?;
        for i in 0..200 {
            let v = lo + (hi - lo) * i as f64 / 199.0;
            let u = steady_throttle(&pwa, v).map_err(err)?;
            check(
                u > 0.0 && u <= cfg.bounds.u_max,
                format!("mass {mass}: throttle {u} at v = {v}"),
            )?;
        }
    }
    Ok(format!(
        "residual {worst:.1e}; throttle admissible above {bound:.4} kg"
    ))
}

fn safety() -> Outcome {
    let mut runs = 0;
    let mut margin = f64::INFINITY;
    for task in [1u8, 2] {
        for controller in [ControllerKind::Centralized, ControllerKind::Sequential] {
            for seed in 0..5 {
                let mut s = RunSetup::new(
                    Task::standard(task).map_err(err)?.with_k_sim(DEFAULT_K_SIM),
                    controller.clone(),
                    3,
                    4,
                    seed,
                );
                s.solver = solver();
                let res = run_simulation(&s).map_err(err)?;
                let tag = format!("task {task} {} seed {seed}", controller.label());
                check(
                    res.completed(),
                    format!("{tag}: {}", res.summary.error.clone().unwrap_or_default()),
                )?;
                check(
                    res.summary.breaches == 0,
                    format!("{tag}: {} breaches", res.summary.breaches),
                )?;
                margin = margin.min(res.summary.min_gap_margin);
                runs += 1;
            }
        }
    }
    Ok(format!(
        "{runs} runs of {DEFAULT_K_SIM} steps, 0 breaches, smallest gap margin {margin:.2} m"
    ))
}

fn suboptimality() -> Outcome {
    let (mut worst, mut skipped) = (f64::INFINITY, 0);
    for seed in 0..10 {
        let (cfg, states, reference) = instance(2, 3, 3, seed)?;
        let global = build_centralized(&cfg, &states, &reference).map_err(err)?;
        let cent = centralized_step(
            &cfg,
            &states,
            &reference,
            &exact_solver(),
            &mut ControllerState::default(),
        )
        .map_err(err)?;
        if cent.plans.iter().flat_map(|p| &p.slacks).any(|&s| s > 1e-9) {
            skipped += 1;
            continue;
        }
        let j_cent = global.evaluate(&cent.plans, &[]).map_err(err)?;
        let dec = decentralized_step(
            &cfg,
            &states,
            &reference,
            &exact_solver(),
            &mut ControllerState::default(),
        )
        .map_err(err)?;
        let mut bus = CommBus::new(3, 1);
        let seq = sequential_step(
            &cfg,
            &states,
            &reference,
            &exact_solver(),
            &mut ControllerState::default(),
            &mut bus,
        )
        .map_err(err)?;
        for (name, plans) in [("decentralized", &dec.plans), ("sequential", &seq.plans)] {
            let dj = global.evaluate(plans, &[]).map_err(err)? - j_cent;
            worst = worst.min(dj);
            check(
                dj >= -1e-6,
                format!("instance {seed}: {name} open-loop delta J {dj:e}"),
            )?;
        }
    }
    check(skipped < 10, "every instance needed safety slack")?;

    let mut deltas = Vec::new();
    for seed in 0..3 {
        let mut j = Vec::new();
        for controller in [ControllerKind::Centralized, ControllerKind::Decentralized] {
            let mut s = RunSetup::new(
                Task::standard(2).map_err(err)?.with_k_sim(DEFAULT_K_SIM),
                controller,
                3,
                3,
                seed,
            );
            s.solver = solver();
            let res = run_simulation(&s).map_err(err)?;
            check(
                res.completed(),
                format!(
                    "seed {seed}: {}",
                    res.summary.error.clone().unwrap_or_default()
                ),
            )?;
            j.push(res.summary.j);
        }
        deltas.push(j[1] - j[0]);
    }
    let (mean, _) = mean_std(&deltas).ok_or("no closed-loop runs")?;
    check(mean >= 0.0, format!("closed-loop mean delta J {mean}"))?;
    Ok(format!(
        "open-loop min delta J {worst:.3e} ({skipped} instances with slack skipped); closed-loop mean delta J {mean:.2}"
    ))
}

fn event_consistency() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (cfg, states, reference) = instance(2, 2, 2, seed)?;
        let global = build_centralized(&cfg, &states, &reference).map_err(err)?;
        let cent = solve_bnb(&global.mip, &exact_solver()).map_err(err)?;
        let mut bus = CommBus::new(2, 2);
        let out = event_based_step(
            &cfg,
            &states,
            &reference,
            &exact_solver(),
            &mut ControllerState::default(),
            &mut bus,
            10,
            EventThreshold::Absolute(1e-9),
        )
        .map_err(err)?;
        let j = global.evaluate(&out.plans, &[]).map_err(err)?;
        let d = (j - cent.objective).abs();
        worst = worst.max(d);
        check(
            d <= 1e-4,
            format!(
                "instance {seed}: event-based {j} vs centralized {}",
                cent.objective
            ),
        )?;
    }
    Ok(format!(
        "largest cost difference {worst:.1e} over 5 instances"
    ))
}

fn admm_convergence() -> Outcome {
    let (mut worst_res, mut worst_gap): (f64, f64) = (0.0, 0.0);
    for seed in 0..5 {
        let (cfg, states, reference) = instance(2, 2, 2, seed)?;
        let global = build_centralized(&cfg, &states, &reference).map_err(err)?;
        let cent = solve_bnb(&global.mip, &exact_solver()).map_err(err)?;
        let mut bus = CommBus::new(2, 1);
        let out = admm_step(
            &cfg,
            &states,
            &reference,
            &exact_solver(),
            &mut ControllerState::default(),
            &mut bus,
            50,
            1.0,
            AdmmBinaries::CentralizedOptimum,
        )
        .map_err(err)?;
        let residual = *out.residuals.last().ok_or("no ADMM iterations")?;
        let j = global.evaluate(&out.plans, &[]).map_err(err)?;
        let gap = (j - cent.objective).abs() / cent.objective.abs().max(1.0);
        worst_res = worst_res.max(residual);
        worst_gap = worst_gap.max(gap);
        check(
            residual <= 1e-3,
            format!("instance {seed}: primal residual {residual:e}"),
        )?;
        check(
            gap <= 1e-3,
            format!(
                "instance {seed}: objective gap {gap:e} ({j} vs {})",
                cent.objective
            ),
        )?;
    }
    Ok(format!(
        "largest primal residual {worst_res:.1e}, largest relative gap {worst_gap:.1e}"
    ))
}

fn mass_bound() -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for model in [ModelKind::PwaGear, ModelKind::DiscreteGear] {
        let cfg = PlatoonConfig {
            model,
            ..PlatoonConfig::default()
        };
        let problem = MassBoundProblem::from_config(&cfg);
        let literal =
            feasibility_mass_bound(&problem, MassBoundReading::LiteralFormula).map_err(err)?;
        let consistent =
            feasibility_mass_bound(&problem, MassBoundReading::DynamicsConsistent).map_err(err)?;
        let fmt = |b: Option<f64>| b.map_or("none".to_string(), |v| format!("{v:.4} kg"));
        lines.push(format!(
            "{}: reported {REPORTED_MASS_BOUND} kg, literal {}, dynamics-consistent {}",
            model.label(),
            fmt(literal),
            fmt(consistent)
        ));
        match consistent {
            Some(b) => {
                let cert = certify_mass_bound(&problem, b, ORACLE_POINTS).map_err(err)?;
                if !cert.holds() {
                    failures.push(format!("{}: certificate {cert:?}", model.label()));
                }
            }
            None => {
                let at = problem.first_failure(1e-3, ORACLE_POINTS).map_err(err)?;
                failures.push(format!(
                    "{}: no mass passes the oracle (even 1 g fails at v = {:.3} m/s)",
                    model.label(),
                    at.unwrap_or(f64::NAN)
                ));
            }
        }
    }
    let report = lines.join("; ");
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(format!("{}; {report}", failures.join("; ")))
    }
}

const DETERMINISM_CONFIG: &str = r#"{
  "experiments": [
    { "task": 2, "controller": { "kind": "sequential" }, "m": [3], "n": [3], "seeds": [0, 1], "k_sim": 10 },
    { "task": 3, "controller": { "kind": "event-based", "iterations": 3 }, "m": [3], "n": [2], "seeds": [2], "k_sim": 10 }
  ]
}"#;

fn determinism() -> Outcome {
    let cfg = parse_config(DETERMINISM_CONFIG).map_err(err)?;
    let mut digests = Vec::new();
    for workers in [1, 2] {
        let dir = tempfile::tempdir().map_err(err)?;
        let outcome = run_matrix(&cfg, dir.path(), workers).map_err(err)?;
        check(outcome.failures == 0, "a run failed")?;
        let mut rows: Vec<&ManifestRow> = outcome
            .manifest
            .iter()
            .filter(|r| r.role == RunRole::Run)
            .collect();
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let mut digest = Vec::new();
        for r in rows {
            let s = read_summary(std::path::Path::new(
                r.summary.as_deref().ok_or("summary path missing")?,
            ))
            .map_err(err)?;
            digest.push((r.id.clone(), s.j, s.delta_j, s.n_no, s.breaches, s.messages));
        }
        digests.push(digest);
    }
    check(digests[0] == digests[1], "rerun changed a metric")?;
    Ok(format!("{} runs reproduced", digests[0].len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, f64);
    let criteria: [Criterion; 11] = [
        ("binary-count anchor", binary_counts, 1.0),
        ("MLD/PWA equivalence", mld_equivalence, 10.0),
        ("solver correctness", solver_correctness, 60.0),
        ("model ordering", model_ordering, 120.0),
        ("steady-state fixed point", steady_state, 5.0),
        ("safety at desk scale", safety, 600.0),
        ("suboptimality ordering", suboptimality, 600.0),
        ("event-based consistency", event_consistency, 300.0),
        (
            "ADMM convex-restriction convergence",
            admm_convergence,
            300.0,
        ),
        ("mass-bound oracle", mass_bound, 30.0),
        ("determinism", determinism, 300.0),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (idx, (name, run, limit)) in criteria.iter().enumerate() {
        let number = idx + 1;
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > *limit => {
                Err(format!("{detail}; took {secs:.1} s, limit {limit} s"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {number:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} FAIL  {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
