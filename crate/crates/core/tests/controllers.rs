use platoon::controllers::{
    centralized_step, decentralized_step, event_based_step, sequential_ranks, sequential_step,
    CommBus, ControllerState, EventThreshold,
};
use platoon::mip::{solve_bnb, solve_relaxation, RelaxStatus, SolverOptions};
use platoon::mld::ModelKind;
use platoon::models::State;
use platoon::mpc::{build_centralized, PlatoonConfig};

fn config(m: usize, n: usize) -> PlatoonConfig {
    PlatoonConfig {
        horizon: n,
        ..PlatoonConfig::default()
    }
    .with_size(m)
}

fn solver() -> SolverOptions {
    SolverOptions {
        sos_branching: true,
        ..SolverOptions::default()
    }
}

fn reference(n: usize, v: f64) -> Vec<State> {
    (0..=n).map(|k| State::new(v * k as f64, v)).collect()
}

fn one_hot(len: usize, at: usize) -> Vec<f64> {
    (0..len).map(|q| f64::from(u8::from(q == at))).collect()
}

#[test]
fn centralized_optimum_matches_region_enumeration() {
    let cfg = config(2, 2);
    assert_eq!(cfg.model, ModelKind::PwaGear);
    let cases = [
        [State::new(0.0, 18.0), State::new(-60.0, 23.0)],
        [State::new(5.0, 27.0), State::new(-45.0, 12.0)],
    ];
    for states in cases {
        let r = reference(2, 20.0);
        let problem = build_centralized(&cfg, &states, &r).unwrap();
        let width = problem.vehicles[0].bin[0].len();
        let slots = 2 * cfg.horizon;
        let mut best = f64::INFINITY;
        for code in 0..width.pow(slots as u32) {
            let mut choice = Vec::with_capacity(slots);
            let mut c = code;
            for _ in 0..slots {
                choice.push(c % width);
                c /= width;
            }
            let mut fixed = problem.clone();
            for i in 0..2 {
                let values: Vec<Vec<f64>> = (0..cfg.horizon)
                    .map(|k| one_hot(width, choice[i * cfg.horizon + k]))
                    .collect();
                fixed.fix_binaries(i, &values).unwrap();
            }
            let r = solve_relaxation(&fixed.mip).unwrap();
            if r.status == RelaxStatus::Optimal {
                best = best.min(r.objective);
            }
        }
        let bnb = solve_bnb(&problem.mip, &solver()).unwrap();
        assert!(
            (bnb.objective - best).abs() <= 1e-6 * (1.0 + best.abs()),
            "{} vs {best}",
            bnb.objective
        );

        let mut st = ControllerState::default();
        let out = centralized_step(&cfg, &states, &r, &solver(), &mut st).unwrap();
        assert!((out.plans[0].objective - best).abs() <= 1e-6 * (1.0 + best.abs()));
    }
}

#[test]
fn sequential_first_rank_solves_the_decentralized_problem() {
    let cfg = PlatoonConfig {
        leader: 1,
        ..config(3, 3)
    };
    let states = [
        State::new(0.0, 21.0),
        State::new(-55.0, 17.0),
        State::new(-120.0, 24.0),
    ];
    let r = reference(3, 20.0);
    let dec = decentralized_step(
        &cfg,
        &states,
        &r,
        &solver(),
        &mut ControllerState::default(),
    )
    .unwrap();
    let mut bus = CommBus::new(3, 1);
    let seq = sequential_step(
        &cfg,
        &states,
        &r,
        &solver(),
        &mut ControllerState::default(),
        &mut bus,
    )
    .unwrap();
    assert_eq!(sequential_ranks(3, 1), vec![vec![1], vec![0, 2]]);
    let tol = 1e-6 * (1.0 + dec.plans[1].objective.abs());
    assert!((seq.plans[1].objective - dec.plans[1].objective).abs() <= tol);
    assert_eq!(seq.messages, 4);
    assert_eq!(bus.count(1, 0) + bus.count(1, 2), 2);
}

#[test]
fn event_messages_follow_events() {
    let cfg = config(4, 2);
    let states = [
        State::new(0.0, 22.0),
        State::new(-52.0, 15.0),
        State::new(-118.0, 26.0),
        State::new(-160.0, 19.0),
    ];
    let r = reference(2, 20.0);
    let mut bus = CommBus::new(4, 2);
    let mut st = ControllerState::default();
    let out = event_based_step(
        &cfg,
        &states,
        &r,
        &solver(),
        &mut st,
        &mut bus,
        3,
        EventThreshold::Absolute(1e-6),
    )
    .unwrap();
    let expected: usize = out
        .events
        .iter()
        .map(|&w| {
            (w.saturating_sub(2)..=(w + 2).min(3))
                .filter(|&j| j != w)
                .count()
        })
        .sum();
    assert_eq!(out.messages, expected);
    assert_eq!(bus.total_messages(), expected);
    assert!(out.iterations <= 3);

    // an unreachable threshold leaves the decentralized plans untouched
    let mut quiet = CommBus::new(4, 2);
    let out = event_based_step(
        &cfg,
        &states,
        &r,
        &solver(),
        &mut ControllerState::default(),
        &mut quiet,
        3,
        EventThreshold::Absolute(f64::INFINITY),
    )
    .unwrap();
    assert!(out.events.is_empty());
    assert_eq!(quiet.total_messages(), 0);
    let dec = decentralized_step(
        &cfg,
        &states,
        &r,
        &solver(),
        &mut ControllerState::default(),
    )
    .unwrap();
    assert_eq!(out.plans, dec.plans);
}

#[test]
fn event_improvements_never_raise_the_platoon_cost() {
    let cfg = config(3, 2);
    let states = [
        State::new(0.0, 24.0),
        State::new(-48.0, 16.0),
        State::new(-110.0, 21.0),
    ];
    let r = reference(2, 20.0);
    let global = build_centralized(&cfg, &states, &r).unwrap();
    let mut last = f64::INFINITY;
    for iterations in 1..=3 {
        let mut bus = CommBus::new(3, 2);
        let out = event_based_step(
            &cfg,
            &states,
            &r,
            &solver(),
            &mut ControllerState::default(),
            &mut bus,
            iterations,
            EventThreshold::Absolute(0.0),
        )
        .unwrap();
        let cost = global.evaluate(&out.plans, &[]).unwrap();
        assert!(cost <= last + 1e-6 * (1.0 + cost.abs()));
        last = cost;
    }
}
