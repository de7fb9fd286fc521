//! Running a shipped scenario from code and writing its artifacts.
//!
//!     cargo run --release --example run_scenario -- pow_double_spend

use permsim::experiment::{builtin_scenario, execute, output_dir, output_root, write_artifacts, ExperimentSpec};

fn main() -> permsim::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "honest_pow_liveness".into());
    let text = builtin_scenario(&name).unwrap_or_else(|| panic!("no scenario {name}"));
    let spec = ExperimentSpec::from_toml(text).expect("shipped scenario parses");
    let ex = execute(&spec).expect("shipped scenario is valid");
    let dir = output_dir(&spec, &output_root());
    write_artifacts(&ex, &dir)?;
    for c in &ex.report.cells {
        println!("cell {} {:?}", c.cell, c.labels);
        for (k, e) in &c.estimates {
            println!("  {k}: {:.3} [{:.3}, {:.3}]", e.point, e.lower, e.upper);
        }
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
