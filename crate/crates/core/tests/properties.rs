//! Property tests over models, the MLD compilation, the solver and the
//! simulation metrics.

use platoon::mip::{brute_force_binaries, solve_bnb, solve_relaxation, RelaxStatus, SolverOptions};
use platoon::mld::{build_mld_model1, mld_simulate, BoxBounds, ModelKind};
use platoon::models::{
    build_pwa_model, integrate_with_trace, nearest_valid_gear, plant_integrate, step_model1,
    valid_gears, Gear, GearTable, PwaFriction, State, VehicleParams, DEFAULT_SUBSTEPS,
};
use platoon::mpc::{
    build_centralized, resimulation_error, spacing_error, stage_cost, PlatoonConfig, SpacingPolicy,
};
use platoon::sim::{aggregate, count_breaches, mean_std, tracking_cost};
use proptest::prelude::*;

mod common;
use common::random_mip;

fn setup() -> (VehicleParams, GearTable, BoxBounds, PwaFriction) {
    let params = VehicleParams::default();
    let bounds = BoxBounds::default();
    let friction = PwaFriction::from_anchors(params.c, bounds.v_max);
    (params, GearTable::default(), bounds, friction)
}

fn velocity() -> impl Strategy<Value = f64> {
    let b = BoxBounds::default();
    b.v_min..b.v_max
}

#[test]
fn friction_is_monotone_from_zero() {
    let (_, _, bounds, f) = setup();
    assert_eq!(f.eval(0.0), 0.0);
    let grid: Vec<f64> = (0..1000).map(|i| bounds.v_max * i as f64 / 999.0).collect();
    for w in grid.windows(2) {
        assert!(f.eval(w[1]) >= f.eval(w[0]));
    }
    let eps = 1e-9;
    assert!((f.eval(f.alpha + eps) - f.eval(f.alpha - eps)).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn regions_tile_the_velocity_range(v in velocity()) {
        let (params, gears, _, friction) = setup();
        let pwa = build_pwa_model(&params, &gears, &friction).unwrap();
        let hits = pwa.regions.iter().filter(|r| r.v_lo <= v && v < r.v_hi).count();
        prop_assert_eq!(hits, 1);
        let gear = pwa.implied_gear(v).unwrap();
        prop_assert!(valid_gears(&gears, v).contains(&gear));
    }

    #[test]
    fn model1_matches_its_mld_form(
        p in 0.0f64..10_000.0,
        v in velocity(),
        u in -1.0f64..=1.0,
    ) {
        let (params, gears, bounds, friction) = setup();
        let pwa = build_pwa_model(&params, &gears, &friction).unwrap();
        let mld = build_mld_model1(&pwa, &bounds, 1.0).unwrap();
        let x = State::new(p, v);
        let (a, _) = step_model1(&pwa, x, u, 1.0).unwrap();
        let b = mld_simulate(&mld, x, u, None).unwrap();
        prop_assert!((a.position - b.position).abs() <= 1e-6);
        prop_assert!((a.velocity - b.velocity).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plant_stays_finite(
        v0 in velocity(),
        inputs in proptest::collection::vec((-1.0f64..=1.0, 1u8..=6), 100),
    ) {
        let (params, gears, _, _) = setup();
        let mut x = State::new(0.0, v0);
        for (u, g) in inputs {
            let gear = nearest_valid_gear(&gears, x.velocity, Gear::new(g).unwrap());
            x = plant_integrate(&params, &gears, x, u, gear, 1.0, DEFAULT_SUBSTEPS);
            prop_assert!(x.is_finite());
        }
    }

    #[test]
    fn position_change_matches_mean_velocity(
        v0 in velocity(),
        u in -1.0f64..=1.0,
        g in 1u8..=6,
    ) {
        let (params, gears, _, _) = setup();
        let x = State::new(0.0, v0);
        let gear = Gear::new(g).unwrap();
        let (next, trace, _) = integrate_with_trace(&params, &gears, x, u, gear, 1.0, DEFAULT_SUBSTEPS);
        // Trapezoidal mean over the substep grid.
        let n = trace.len() - 1;
        let mean = trace.windows(2).map(|w| 0.5 * (w[0].velocity + w[1].velocity)).sum::<f64>() / n as f64;
        prop_assert!((next.position - x.position - mean).abs() <= 0.05);
    }

    #[test]
    fn one_hot_is_enforced(pattern in proptest::collection::vec(0u8..=1, 7)) {
        let ones = pattern.iter().filter(|&&b| b == 1).count();
        prop_assume!(ones != 1);
        let cfg = PlatoonConfig { horizon: 1, ..PlatoonConfig::default() }.with_size(1);
        let reference = vec![State::new(0.0, 20.0), State::new(20.0, 20.0)];
        let mut problem = build_centralized(&cfg, &[State::new(0.0, 20.0)], &reference).unwrap();
        let values = vec![pattern.iter().map(|&b| f64::from(b)).collect::<Vec<_>>()];
        problem.fix_binaries(0, &values).unwrap();
        let r = solve_relaxation(&problem.mip).unwrap();
        prop_assert_eq!(r.status, RelaxStatus::Infeasible);
    }

    #[test]
    fn decoded_plans_resimulate(
        v in proptest::collection::vec(8.0f64..40.0, 2),
        gap in 60.0f64..160.0,
        model2 in any::<bool>(),
    ) {
        let cfg = PlatoonConfig {
            horizon: 2,
            model: if model2 { ModelKind::DiscreteGear } else { ModelKind::PwaGear },
            ..PlatoonConfig::default()
        }
        .with_size(2);
        let states = [State::new(0.0, v[0]), State::new(-gap, v[1])];
        let reference: Vec<State> = (0..3).map(|k| State::new(20.0 * k as f64, 20.0)).collect();
        let problem = build_centralized(&cfg, &states, &reference).unwrap();
        let res = solve_bnb(&problem.mip, &SolverOptions::default()).unwrap();
        let sol = problem.decode(res.incumbent.as_ref().unwrap()).unwrap();
        for plan in &sol.plans {
            prop_assert!(resimulation_error(&cfg, plan).unwrap() <= 1e-6);
        }
        // Well-separated starts keep the safety constraint slack-free.
        prop_assert!(sol.max_slack() <= 1e-6);
    }

    #[test]
    fn spacing_terms_vanish_on_formation(
        v in 5.0f64..40.0,
        d0 in 25.0f64..80.0,
        t0 in 0.0f64..3.0,
        velocity_dependent in any::<bool>(),
        lead in -500.0f64..500.0,
    ) {
        let spacing = if velocity_dependent {
            SpacingPolicy::VelocityDependent { d0, t0 }
        } else {
            SpacingPolicy::ConstantDistance { d0 }
        };
        let front = State::new(lead, v);
        let gap = d0 + if velocity_dependent { t0 * v } else { 0.0 };
        let rear = State::new(lead - gap, v);
        let e = spacing_error(&spacing, front, rear);
        prop_assert!(e[0].abs() <= 1e-9 && e[1].abs() <= 1e-9);
    }

    #[test]
    fn cost_is_translation_invariant(
        xs in proptest::collection::vec((-300.0f64..0.0, 5.0f64..40.0), 3),
        us in proptest::collection::vec(-1.0f64..=1.0, 3),
        offset in -1000.0f64..1000.0,
    ) {
        let cfg = PlatoonConfig::default();
        let states: Vec<State> = xs.iter().map(|&(p, v)| State::new(p, v)).collect();
        let moved: Vec<State> = states.iter().map(|s| State::new(s.position + offset, s.velocity)).collect();
        let r = State::new(10.0, 20.0);
        let a = stage_cost(&cfg, &states, Some(&us), r);
        let b = stage_cost(&cfg, &moved, Some(&us), State::new(r.position + offset, r.velocity));
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn cost_decreases_with_input_weight(
        xs in proptest::collection::vec((-300.0f64..0.0, 5.0f64..40.0), 3),
        us in proptest::collection::vec(-1.0f64..=1.0, 3),
        q in 0.0f64..2.0,
    ) {
        let states = vec![xs.iter().map(|&(p, v)| State::new(p, v)).collect::<Vec<_>>(); 4];
        let inputs = vec![us.clone(); 3];
        let reference = vec![State::new(0.0, 20.0); 4];
        let at = |q_u: f64| {
            let cfg = PlatoonConfig { q_u, ..PlatoonConfig::default() };
            tracking_cost(&cfg, &states, &inputs, &reference)
        };
        let (hi, lo, zero) = (at(q), at(0.5 * q), at(0.0));
        prop_assert!(hi.is_finite());
        prop_assert!(hi >= lo - 1e-9 && lo >= zero - 1e-9);
    }

    #[test]
    fn breach_count_matches_injection(
        gaps in proptest::collection::vec(30.0f64..100.0, 6),
        step in 0usize..6,
        pair in 0usize..2,
    ) {
        let d_safe = 25.0;
        let mut states: Vec<Vec<State>> = gaps
            .chunks(2)
            .map(|g| vec![State::new(0.0, 20.0), State::new(-g[0], 20.0), State::new(-g[0] - g[1], 20.0)])
            .collect();
        let k = step % states.len();
        let front = states[k][pair].position;
        let shift = states[k][pair + 1].position - (front - 10.0);
        for s in states[k][pair + 1..].iter_mut() {
            s.position -= shift;
        }
        prop_assert_eq!(count_breaches(&states, d_safe).0, 1);
    }

    #[test]
    fn population_statistics(values in proptest::collection::vec(-100.0f64..100.0, 1..20)) {
        let (mean, std) = mean_std(&values).unwrap();
        let n = values.len() as f64;
        let direct = (values.iter().map(|v| v * v).sum::<f64>() / n - mean * mean).max(0.0).sqrt();
        prop_assert!((std - direct).abs() <= 1e-6 * (1.0 + direct));
        prop_assert!(values.iter().cloned().fold(f64::INFINITY, f64::min) <= mean + 1e-12);
    }
}

#[test]
fn solver_node_properties() {
    for seed in 0..30 {
        let p = random_mip(seed, 6, seed % 3 == 0);
        let opts = SolverOptions {
            record_nodes: true,
            ..SolverOptions::default()
        };
        let res = solve_bnb(&p, &opts).unwrap();
        let again = solve_bnb(&p, &opts).unwrap();
        assert_eq!(res.incumbent, again.incumbent);
        assert_eq!(res.objective, again.objective);
        assert_eq!(res.explored_nodes, again.explored_nodes);

        let brute = brute_force_binaries(&p).unwrap();
        if brute.incumbent.is_none() {
            assert!(res.incumbent.is_none());
            continue;
        }
        assert!(
            (res.objective - brute.objective).abs() <= 1e-6,
            "seed {seed}"
        );
        let tol = 1e-6 * (1.0 + res.objective.abs());
        // Each node bounds the best integer point of its own subtree.
        for node in &res.nodes {
            if !node.relaxation.is_finite() {
                continue;
            }
            let mut sub = p.clone();
            for &(j, v) in &node.fixings {
                sub.lb[j] = f64::from(v);
                sub.ub[j] = f64::from(v);
            }
            let best = brute_force_binaries(&sub).unwrap();
            if best.incumbent.is_some() {
                assert!(node.relaxation <= best.objective + tol, "seed {seed}");
            }
        }
        assert!(res.best_bound <= res.objective + tol);
        for w in res.nodes.windows(2) {
            assert!(w[1].global_bound >= w[0].global_bound - tol);
        }
        for node in &res.nodes {
            assert!(node.global_bound <= brute.objective + tol, "seed {seed}");
        }
        let unpruned = solve_bnb(
            &p,
            &SolverOptions {
                prune: false,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        assert!((unpruned.objective - res.objective).abs() <= tol);
        assert!(unpruned.explored_nodes >= res.explored_nodes);
    }
}

#[test]
fn aggregate_of_one_run_has_zero_spread() {
    use platoon::controllers::ControllerKind;
    use platoon::sim::{run_simulation, RunSetup, Task};
    let task = Task::standard(1).unwrap().with_k_sim(3);
    let mut setup = RunSetup::new(task, ControllerKind::Decentralized, 2, 2, 5);
    setup.solver.sos_branching = true;
    let run = run_simulation(&setup).unwrap();
    let report = aggregate(&[run.clone()]).unwrap();
    assert_eq!(report.j_mean, run.summary.j);
    assert_eq!(report.j_std, 0.0);
    let twice = aggregate(&[run.clone(), run]).unwrap();
    assert_eq!(twice.j_std, 0.0);
}
