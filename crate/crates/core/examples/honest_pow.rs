//! An honest block-lottery network: run it, look at the confirmed chains and
//! write the transcript.
//!
//!     cargo run --example honest_pow

use permsim::analysis::{check_invariants, GrowthSeries, SecurityView};
use permsim::config::presets::pow;
use permsim::run_execution;

fn main() -> permsim::Result<()> {
    // Five processors, 0.05 blocks per slot in expectation, 6-deep confirmation.
    let mut cfg = pow(1000, &[1.0; 5], 0.05, 6);
    cfg.seed = 7;
    let tr = run_execution(&cfg)?;

    println!("{} blocks broadcast over {} slots", tr.broadcasts.len(), tr.slots_run);
    for c in tr.confirmations.iter().rev().take(5) {
        println!("slot {:4} p{}: confirmed length {}", c.slot, c.processor.0, c.length);
    }

    let growth = GrowthSeries::new(&tr)?;
    println!("smallest uniformly live interval: {} slots", growth.ell_star());
    println!("uniform security violations: {}", SecurityView::new(&tr)?.uniform_violations().len());
    println!("framework invariant violations: {}", check_invariants(&tr).len());

    let path = std::env::temp_dir().join("honest_pow.jsonl");
    std::fs::write(&path, tr.to_jsonl())?;
    println!("transcript: {}", path.display());
    Ok(())
}
