//! Build and solve one centralized MPC problem for a three-vehicle platoon
//! under both prediction models.

use platoon::mip::{solve_bnb, SolverOptions};
use platoon::mld::ModelKind;
use platoon::models::State;
use platoon::mpc::{build_centralized, PlatoonConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let states = [
        State::new(0.0, 12.0),
        State::new(-100.0, 30.0),
        State::new(-170.0, 8.0),
    ];
    for model in [ModelKind::PwaGear, ModelKind::DiscreteGear] {
        let cfg = PlatoonConfig {
            horizon: 4,
            model,
            ..PlatoonConfig::default()
        };
        let reference: Vec<State> = (0..=cfg.horizon)
            .map(|k| State::new(20.0 * k as f64, 20.0))
            .collect();
        let problem = build_centralized(&cfg, &states, &reference)?;
        let opts = SolverOptions {
            sos_branching: model == ModelKind::PwaGear,
            ..SolverOptions::default()
        };
        let res = solve_bnb(&problem.mip, &opts)?;
        let x = res.incumbent.as_ref().ok_or("no solution")?;
        let sol = problem.decode(x)?;
        println!(
            "{}: {} variables, {} binaries, objective {:.3}, {} nodes",
            model.label(),
            problem.mip.n(),
            problem.mip.n_binaries(),
            res.objective,
            res.explored_nodes
        );
        for plan in &sol.plans {
            println!(
                "  vehicle {}: u = {:?}, gears = {:?}",
                plan.vehicle,
                plan.throttles
                    .iter()
                    .map(|u| (u * 1e3).round() / 1e3)
                    .collect::<Vec<_>>(),
                plan.gears.iter().map(|g| g.number()).collect::<Vec<_>>()
            );
        }
    }
    Ok(())
}
