//! Integrate the nonlinear vehicle model for one sample in every gear and
//! compare with the gears the prediction models consider valid.

use platoon::models::{
    plant_integrate, valid_gears, Gear, GearTable, State, VehicleParams, DEFAULT_SUBSTEPS,
};

fn main() {
    let params = VehicleParams::default();
    let gears = GearTable::default();
    let x = State::new(0.0, 18.0);
    println!(
        "valid gears at {} m/s: {:?}",
        x.velocity,
        valid_gears(&gears, x.velocity)
    );
    for gear in Gear::all() {
        let next = plant_integrate(&params, &gears, x, 0.5, gear, 1.0, DEFAULT_SUBSTEPS);
        let (traction, clamped) = gears.gear(gear).traction(x.velocity);
        println!(
            "gear {gear}: traction {traction:7.1} N{}  ->  x = {:.3} m, v = {:.3} m/s",
            if clamped { " (clamped)" } else { "" },
            next.position,
            next.velocity
        );
    }
}
