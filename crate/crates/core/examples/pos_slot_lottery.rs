//! The slot-leader lottery: leaders per slot track λ, and each key leads in
//! proportion to its stake.
//!
//!     cargo run --example pos_slot_lottery

use std::collections::BTreeMap;

use permsim::analysis::invariants::standard_form_exceptions;
use permsim::config::presets::pos;
use permsim::run_execution;

fn main() -> permsim::Result<()> {
    let stakes = [4.0, 3.0, 2.0, 1.0];
    let cfg = pos(4000, &stakes, 0.5, 4);
    let tr = run_execution(&cfg)?;

    let mut led: BTreeMap<u32, usize> = BTreeMap::new();
    for b in &tr.broadcasts {
        *led.entry(b.sender.0).or_default() += 1;
    }
    let total: f64 = stakes.iter().sum();
    println!("leader slots: {} of {} (λ = 0.5)", tr.broadcasts.len(), tr.slots_run);
    for (p, n) in &led {
        println!(
            "  p{p}: {:5.3} of blocks, stake share {:5.3}",
            *n as f64 / tr.broadcasts.len() as f64,
            stakes[*p as usize] / total
        );
    }
    let ex = standard_form_exceptions(&tr).unwrap_or_default();
    println!("honest broadcasts below a confirmed block: {}", ex.len());
    Ok(())
}
