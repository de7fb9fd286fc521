//! Turning a liveness table into a uniform bound by the union bound.
//!
//!     cargo run --example union_bound

use permsim::analysis::{recalibrate_union_bound, EllTable};

fn main() -> permsim::Result<()> {
    let table = EllTable::LogInverse { c: 5.0 };
    for n in [1_000, 10_000, 100_000, 1_000_000] {
        let p = recalibrate_union_bound(0.1, n, &table, &[0.1, 0.01])?;
        println!(
            "n = {n:>9}: ε₁ = {:<12} ℓ′ = {:6.1}  |D₁| = {}",
            p.epsilon1_exact, p.ell1, p.duration1
        );
    }
    let p = recalibrate_union_bound(0.1, 1000, &table, &[0.1, 0.01])?;
    for c in &p.sublinearity {
        println!("ℓ′ < {} n for every n >= {}", c.alpha, c.bound);
    }
    // ℓ_ε = c/ε grows too fast for the transformation.
    println!("inverse table accepted: {}", recalibrate_union_bound(0.1, 1000, &EllTable::Inverse { c: 1.0 }, &[]).is_ok());
    Ok(())
}
