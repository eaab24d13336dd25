use platoon::controllers::{Controller, ControllerKind};
use platoon::mip::SolverOptions;
use platoon::models::{build_pwa_model, steady_throttle, State};
use platoon::sim::{
    apply_commands, reference_trajectory, run_simulation, PlantKind, RunSetup, Task,
};

fn solver() -> SolverOptions {
    SolverOptions {
        sos_branching: true,
        ..SolverOptions::default()
    }
}

fn setup(
    task: u8,
    controller: ControllerKind,
    m: usize,
    n: usize,
    k_sim: usize,
    seed: u64,
) -> RunSetup {
    let mut s = RunSetup::new(
        Task::standard(task).unwrap().with_k_sim(k_sim),
        controller,
        m,
        n,
        seed,
    );
    s.solver = solver();
    s
}

#[test]
fn realized_step_matches_prediction_on_exact_plant() {
    let s = setup(2, ControllerKind::Centralized, 3, 4, 6, 4);
    let cfg = s.platoon_config().unwrap();
    let reference = reference_trajectory(&s.task.reference, &cfg, s.seed, 6 + cfg.horizon + 1);
    let mut controller =
        Controller::new(ControllerKind::Centralized, cfg.clone(), solver()).unwrap();
    let mut x = s.initial().unwrap();
    for k in 0..6 {
        let out = controller.step(&x, &reference[k..]).unwrap();
        assert!(out.commands.iter().all(|c| !c.gear_adjusted));
        let next = apply_commands(PlantKind::PredictionModel, &cfg, &x, &out.commands).unwrap();
        for (i, (real, plan)) in next.iter().zip(&out.plans).enumerate() {
            let predicted = plan.states[1];
            assert!(
                (real.position - predicted.position).abs() <= 1e-9
                    && (real.velocity - predicted.velocity).abs() <= 1e-9,
                "step {k} vehicle {i}: {real:?} vs {predicted:?}"
            );
        }
        x = next;
    }
}

#[test]
fn formation_at_reference_speed_costs_only_holding_effort() {
    let k_sim = 20;
    let mut s = setup(1, ControllerKind::Centralized, 3, 4, k_sim, 0);
    s.plant = PlantKind::PredictionModel;
    s.initial_states = Some((0..3).map(|i| State::new(-50.0 * i as f64, 20.0)).collect());
    let res = run_simulation(&s).unwrap();
    assert!(res.completed());
    assert_eq!(res.summary.breaches, 0);

    let cfg = &res.config;
    let pwa = build_pwa_model(&cfg.vehicles[0], &cfg.gears, &cfg.friction).unwrap();
    let u = steady_throttle(&pwa, 20.0).unwrap();
    let expected = (k_sim * cfg.m()) as f64 * cfg.q_u * u.abs();
    assert!(
        (res.summary.j - expected).abs() <= 0.01 * expected,
        "J = {} expected {expected}",
        res.summary.j
    );
}

#[test]
fn paired_baseline_of_itself_is_zero() {
    let mut res = run_simulation(&setup(1, ControllerKind::Decentralized, 2, 3, 4, 1)).unwrap();
    assert_eq!(res.summary.delta_j, None);
    let j = res.summary.j;
    res.set_baseline(j);
    assert_eq!(res.summary.delta_j, Some(0.0));
}

#[test]
fn reruns_reproduce_summaries() {
    for kind in [ControllerKind::Decentralized, ControllerKind::Sequential] {
        let s = setup(2, kind, 3, 3, 6, 7);
        let a = run_simulation(&s).unwrap();
        let b = run_simulation(&s).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.traces, b.traces);
    }
}

#[test]
fn traces_cover_every_step_and_vehicle() {
    let res = run_simulation(&setup(2, ControllerKind::Sequential, 3, 3, 5, 2)).unwrap();
    assert_eq!(res.traces.len(), 6 * 3);
    assert_eq!(res.states().len(), 6);
    assert_eq!(res.inputs().len(), 5);
    assert_eq!(res.steps.len(), 5);
    // two messages per interior vehicle and one per end vehicle
    assert_eq!(res.summary.messages, 5 * 2 * (3 - 1));
    assert!(res
        .traces
        .iter()
        .rev()
        .take(3)
        .all(|r| r.throttle.is_none()));
}

#[test]
fn failing_controller_keeps_partial_traces() {
    let mut s = setup(2, ControllerKind::Centralized, 3, 4, 5, 3);
    s.solver.node_limit = 1;
    let res = run_simulation(&s).unwrap();
    assert!(!res.completed());
    assert!(res.summary.steps_completed < 5);
    assert_eq!(res.traces.len(), (res.summary.steps_completed + 1) * 3);
    assert!(res.summary.error.as_deref().unwrap().contains("step"));
}

#[test]
fn setup_errors_are_rejected() {
    let mut s = setup(1, ControllerKind::Centralized, 3, 3, 4, 0);
    s.masses = Some(vec![800.0; 2]);
    assert!(run_simulation(&s).is_err());
    let mut s = setup(1, ControllerKind::Centralized, 3, 3, 4, 0);
    s.plant = PlantKind::Nonlinear { substeps: 0 };
    assert!(run_simulation(&s).is_err());
}
