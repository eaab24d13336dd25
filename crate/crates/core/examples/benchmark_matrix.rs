//! Run a small experiment matrix from an inline configuration and emit the
//! plot data next to the results.

use platoon::cli::{emit_plot_data, parse_config, run_matrix, PlotKind};

const CONFIG: &str = r#"{
  "experiments": [
    { "task": 2, "controller": { "kind": "decentralized" },
      "m": [2, 3], "n": [3], "seeds": [0, 1], "k_sim": 10,
      "solver": { "sos_branching": true } }
  ]
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = parse_config(CONFIG)?;
    let out = std::env::temp_dir().join("platoon-benchmark-matrix");
    let outcome = run_matrix(&cfg, &out, 2)?;
    for kind in [PlotKind::Trajectory, PlotKind::Sweep] {
        emit_plot_data(&out, kind)?;
    }
    for row in &outcome.aggregate {
        println!(
            "M = {} N = {}: J = {:.1} ± {:.1}, ΔJ = {:.2?}, breaches {}",
            row.m,
            row.n,
            row.j_mean.unwrap_or(f64::NAN),
            row.j_std.unwrap_or(f64::NAN),
            row.delta_j_mean,
            row.breaches
        );
    }
    println!("{} runs, outputs in {}", outcome.runs, out.display());
    Ok(())
}
