//! Solve a small knapsack-like MILP by branch and bound, check it against
//! enumeration and round-trip it through the LP file format.

use platoon::mip::{
    brute_force_binaries, export_lp_file, parse_lp_file, solve_bnb, MixedIntegerProgram,
    SolverOptions,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut p = MixedIntegerProgram::new();
    let values = [6.0, 5.0, 4.0, 3.0, 2.5];
    let weights = [5.0, 4.0, 3.0, 2.0, 2.0];
    let items: Vec<usize> = values
        .iter()
        .enumerate()
        .map(|(i, v)| p.add_binary(-v, format!("take_{i}")))
        .collect();
    let slack = p.add_var(0.0, 3.0, 0.4, "overload");
    let mut row: Vec<(usize, f64)> = items.iter().zip(weights).map(|(&j, w)| (j, w)).collect();
    row.push((slack, -1.0));
    p.add_le(row, 9.0);

    let bnb = solve_bnb(&p, &SolverOptions::default())?;
    let brute = brute_force_binaries(&p)?;
    println!(
        "branch and bound: {:?}, objective {:.4}, {} nodes",
        bnb.status, bnb.objective, bnb.explored_nodes
    );
    println!("enumeration:      objective {:.4}", brute.objective);

    let text = export_lp_file(&p);
    println!("\n{text}");
    let back = parse_lp_file(&text)?;
    println!(
        "re-parsed optimum {:.4}",
        solve_bnb(&back, &SolverOptions::default())?.objective
    );
    Ok(())
}
