//! In the unsized setting an attacker holding the honest total can simulate a
//! lone honest processor and release that chain. Nobody can tell the two
//! executions apart before the release, so both chains carry certificates.
//!
//!     cargo run --release --example simulation_attack

use permsim::experiment::{builtin_scenario, execute, ExperimentSpec};

fn main() {
    let mut spec = ExperimentSpec::from_toml(builtin_scenario("thm_5_1_simulation").unwrap()).unwrap();
    spec.trials = 40;
    let ex = execute(&spec).expect("shipped scenario is valid");
    let cell = &ex.report.cells[0];
    println!("k = {} calibrated on honest-only runs", cell.values["k"]);
    for name in ["certificate_violation", "coupling_identity", "release_atomic"] {
        let e = &cell.estimates[name];
        println!("{name}: {}/{} [{:.3}, {:.3}]", e.successes, e.trials, e.lower, e.upper);
    }
    println!("mean release slot t* = {:.1}", cell.values["t_star_mean"]);
}
