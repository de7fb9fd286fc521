//! Recalibrating a slot-leader protocol to the density rule against a
//! Θ-bounded adversary.
//!
//!     cargo run --release --example density_recalibration

use permsim::adversary::AdversarySpec;
use permsim::analysis::{build_certificate_recalibration, check_certificates, GrowthSeries};
use permsim::config::presets::pos;
use permsim::config::ProcessorSpec;
use permsim::pool::AdversaryBound;
use permsim::protocols::ConfirmationSpec;
use permsim::{prepare, run_execution};

fn main() -> permsim::Result<()> {
    let mut base = pos(3000, &[0.62 / 3.0; 3], 0.8, 6);
    base.epsilon = 0.2;
    base.roster.push(ProcessorSpec::adversary(0.38, AdversarySpec::PrivateFork { confirm_depth: 6, give_up_lag: 6 }));
    base.pool.adversary_bound = AdversaryBound::Domination { theta: 1.5 };
    base.confirmation = ConfirmationSpec::KDeep { k: 6 };

    // ℓ = 16 is what the shipped scenario calibrates at ε/4.
    let plan = build_certificate_recalibration(&base, 16)?;
    println!(
        "r = {}, threshold = {}, {} intervals, ℓ′ = {}",
        plan.r,
        plan.threshold,
        plan.grid.len(),
        plan.ell_prime
    );
    let cfg = plan.apply(&base);
    let rule = prepare(&cfg)?.rule;
    for seed in 0..5 {
        let tr = run_execution(&permsim::ExecutionConfig { seed, ..cfg.clone() })?;
        let violated = check_certificates(&tr, &rule, tr.slots_run).is_some();
        let live = GrowthSeries::new(&tr)?.uniform_growth(plan.ell_prime);
        println!("seed {seed}: certificate violation {violated}, uniformly live at ℓ′ {live}");
    }
    Ok(())
}
