//! Helpers shared by the integration test targets.

use platoon::mip::MixedIntegerProgram;
use rand::{Rng, SeedableRng};

/// Seeded program over `n_bin` binaries and three boxed continuous variables
/// with four random `<=` rows. The quadratic variant stays convex.
pub fn random_mip(seed: u64, n_bin: usize, quadratic: bool) -> MixedIntegerProgram {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = MixedIntegerProgram::new();
    let bins: Vec<usize> = (0..n_bin)
        .map(|i| p.add_binary(r.gen_range(-5.0..5.0), format!("b{i}")))
        .collect();
    let conts: Vec<usize> = (0..3)
        .map(|i| p.add_var(-4.0, 4.0, r.gen_range(-2.0..2.0), format!("x{i}")))
        .collect();
    for _ in 0..4 {
        let row: Vec<(usize, f64)> = bins
            .iter()
            .chain(&conts)
            .map(|&j| (j, r.gen_range(-3.0..3.0)))
            .collect();
        p.add_le(row, r.gen_range(1.0..6.0));
    }
    if quadratic {
        for &j in &conts {
            p.add_quad(j, j, r.gen_range(0.5..3.0));
        }
        p.add_square(&[(bins[0], 1.0), (conts[0], -1.0)], 0.3, 1.5);
    }
    p
}
