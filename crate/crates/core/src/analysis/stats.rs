//! Binomial estimates with Wilson score intervals.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Wilson score interval for `successes` out of `trials` at quantile `z`.
pub fn wilson(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub successes: u64,
    pub trials: u64,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn new(successes: u64, trials: u64) -> Self {
        let (lower, upper) = wilson(successes, trials, Z95);
        Self {
            successes,
            trials,
            point: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
            lower,
            upper,
        }
    }

    pub fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        let (mut s, mut n) = (0, 0);
        for f in flags {
            n += 1;
            s += f as u64;
        }
        Self::new(s, n)
    }

    /// True when the two intervals intersect.
    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.lower <= other.upper && other.lower <= self.upper
    }
}

/// Trials needed so the Wilson half-width at `p` is at most `half_width`,
/// using the normal approximation `n = z²p(1-p)/w²`.
pub fn trials_for_half_width(p: f64, half_width: f64) -> u64 {
    (Z95 * Z95 * p * (1.0 - p) / (half_width * half_width)).ceil() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_known_values() {
        // 8 of 10 at 95%: (0.4902, 0.9433) to four places.
        let (lo, hi) = wilson(8, 10, Z95);
        assert!((lo - 0.4902).abs() < 1e-4, "{lo}");
        assert!((hi - 0.9433).abs() < 1e-4, "{hi}");
        let (lo, hi) = wilson(0, 50, Z95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.07135).abs() < 1e-4, "{hi}");
    }

    #[test]
    fn interval_contains_point_and_shrinks() {
        let a = Estimate::new(30, 100);
        let b = Estimate::new(300, 1000);
        assert!(a.lower < 0.3 && 0.3 < a.upper);
        assert!(b.upper - b.lower < a.upper - a.lower);
        assert!(a.overlaps(&b));
        assert!(!Estimate::new(0, 1000).overlaps(&Estimate::new(1000, 1000)));
    }

    #[test]
    fn half_width_sizing() {
        assert_eq!(trials_for_half_width(0.5, 0.05), 385);
    }
}
