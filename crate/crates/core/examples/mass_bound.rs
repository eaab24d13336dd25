//! Both readings of the speed-holding mass condition next to the value
//! reported in the literature.

use platoon::mld::ModelKind;
use platoon::mpc::PlatoonConfig;
use platoon::sim::{
    feasibility_mass_bound, MassBoundProblem, MassBoundReading, ORACLE_POINTS, REPORTED_MASS_BOUND,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for model in [ModelKind::PwaGear, ModelKind::DiscreteGear] {
        let cfg = PlatoonConfig {
            model,
            ..PlatoonConfig::default()
        };
        let problem = MassBoundProblem::from_config(&cfg);
        let literal = feasibility_mass_bound(&problem, MassBoundReading::LiteralFormula)?;
        let consistent = feasibility_mass_bound(&problem, MassBoundReading::DynamicsConsistent)?;
        println!("{}:", model.label());
        println!("  reported            {REPORTED_MASS_BOUND} kg");
        println!("  literal formula     {literal:?}");
        println!("  dynamics-consistent {consistent:?}");
        if consistent.is_none() {
            let failure = problem.first_failure(cfg.vehicles[0].mass, ORACLE_POINTS)?;
            println!(
                "  first velocity without a holding throttle at {} kg: {failure:?}",
                cfg.vehicles[0].mass
            );
        }
    }
    Ok(())
}
