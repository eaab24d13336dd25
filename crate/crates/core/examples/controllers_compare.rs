//! Five steps of each controller from the same formation, with the
//! computation time and communication they report.

use platoon::controllers::{AdmmBinaries, Controller, ControllerKind, EventThreshold};
use platoon::mip::SolverOptions;
use platoon::models::State;
use platoon::mpc::PlatoonConfig;
use platoon::sim::{apply_commands, sample_initial_conditions, PlantKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PlatoonConfig {
        horizon: 3,
        ..PlatoonConfig::default()
    };
    let solver = SolverOptions {
        sos_branching: true,
        ..SolverOptions::default()
    };
    let kinds = [
        ControllerKind::Centralized,
        ControllerKind::Decentralized,
        ControllerKind::Sequential,
        ControllerKind::EventBased {
            iterations: 3,
            threshold: EventThreshold::default(),
        },
        ControllerKind::Admm {
            iterations: 3,
            rho: 1.0,
            binaries: AdmmBinaries::Free,
        },
    ];
    let start = sample_initial_conditions(cfg.m(), 4);
    for kind in kinds {
        let mut ctrl = Controller::new(kind, cfg.clone(), solver.clone())?;
        let mut x = start.clone();
        let mut time = 0.0;
        for k in 0..5 {
            let reference: Vec<State> = (k..=k + cfg.horizon)
                .map(|j| State::new(20.0 * j as f64, 20.0))
                .collect();
            let out = ctrl.step(&x, &reference)?;
            time += out.computation_time;
            x = apply_commands(PlantKind::default(), &cfg, &x, &out.commands)?;
        }
        println!(
            "{:>13}: {:.3} s computation, {} messages, final gaps {:?}",
            ctrl.kind.label(),
            time,
            ctrl.bus.total_messages(),
            x.windows(2)
                .map(|w| (w[0].position - w[1].position).round())
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
