//! A closed-loop run of task 2 with the sequential controller, printing the
//! metrics a benchmark cell records.

use platoon::controllers::ControllerKind;
use platoon::sim::{run_simulation, RunSetup, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = Task::standard(2)?.with_k_sim(30);
    let mut setup = RunSetup::new(task, ControllerKind::Sequential, 3, 3, 7);
    setup.solver.sos_branching = true;
    let run = run_simulation(&setup)?;
    let s = &run.summary;
    println!(
        "masses {:?}",
        s.masses.iter().map(|m| m.round()).collect::<Vec<_>>()
    );
    println!(
        "J = {:.2}, breaches = {}, smallest gap margin {:.2} m",
        s.j, s.breaches, s.min_gap_margin
    );
    println!("n_no = {}, messages = {}", s.n_no, s.messages);
    if let Some(t) = run.timing.t_comp {
        println!(
            "t_COMP min/avg/max = {:.4}/{:.4}/{:.4} s",
            t.min, t.avg, t.max
        );
    }
    for row in run.traces.iter().filter(|r| r.step % 10 == 0) {
        println!(
            "k = {:3} vehicle {} x = {:8.1} v = {:5.2} gear {:?}",
            row.step, row.vehicle, row.position, row.velocity, row.gear
        );
    }
    Ok(())
}
