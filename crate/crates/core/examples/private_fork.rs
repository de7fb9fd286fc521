//! Double spending with a private fork against k-deep confirmation, as the
//! adversary's share grows.
//!
//!     cargo run --release --example private_fork

use permsim::adversary::AdversarySpec;
use permsim::analysis::{Estimate, SecurityView};
use permsim::config::presets::pow;
use permsim::config::ProcessorSpec;
use permsim::pool::AdversaryBound;
use permsim::run_execution;

fn main() -> permsim::Result<()> {
    for q in [0.1, 0.2, 0.3, 0.4] {
        let mut hits = Vec::new();
        for seed in 0..100 {
            let mut cfg = pow(1500, &[1.0; 3], 0.05, 3);
            cfg.seed = seed;
            let bal = q * 3.0 / (1.0 - q) * 0.999;
            cfg.roster.push(ProcessorSpec::adversary(
                bal,
                AdversarySpec::PrivateFork { confirm_depth: 3, give_up_lag: 6 },
            ));
            cfg.pool.adversary_bound = AdversaryBound::Fraction { q };
            let tr = run_execution(&cfg)?;
            hits.push(SecurityView::new(&tr)?.uniform_violated());
        }
        let e = Estimate::from_flags(hits);
        println!("q = {q}: double spend in {:.2} of runs [{:.2}, {:.2}]", e.point, e.lower, e.upper);
    }
    Ok(())
}
