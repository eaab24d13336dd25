//! Model I as a piecewise-affine map and as its compiled MLD form agree on
//! one-step successors.

use platoon::mld::{build_mld_model1, mld_simulate, BoxBounds};
use platoon::models::{
    build_pwa_model, steady_throttle, step_model1, GearTable, PwaFriction, State, VehicleParams,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = VehicleParams::default();
    let gears = GearTable::default();
    let bounds = BoxBounds::default();
    let friction = PwaFriction::from_anchors(params.c, bounds.v_max);
    let pwa = build_pwa_model(&params, &gears, &friction)?;
    let mld = build_mld_model1(&pwa, &bounds, 1.0)?;
    println!(
        "{} regions, {} binaries and {} auxiliaries per step",
        pwa.regions.len(),
        mld.n_binaries(),
        mld.n_aux()
    );
    for r in &pwa.regions {
        println!(
            "  [{:6.2}, {:6.2}) gear {} traction {:7.1} N",
            r.v_lo, r.v_hi, r.gear, r.traction
        );
    }
    for v in [6.0, 15.0, 25.0, 35.0] {
        let x = State::new(100.0, v);
        let u = steady_throttle(&pwa, v)?;
        let (a, gear) = step_model1(&pwa, x, u, 1.0)?;
        let b = mld_simulate(&mld, x, u, None)?;
        println!(
            "v = {v:4.1}: holding throttle {u:.4} in gear {gear}; PWA {:.9} vs MLD {:.9}",
            a.velocity, b.velocity
        );
    }
    Ok(())
}
