//! Recalibration plans: the union-bound transformation that turns a liveness
//! bound into a uniform one, and the density-certificate transformation for
//! bounded adversaries.

use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::config::{ExecutionConfig, Sizing, Timing};
use crate::error::{Error, Result};
use crate::pool::{decimal_ratio, AdversaryBound};
use crate::permitter::PermitterSpec;
use crate::protocols::{
    density_threshold, interval_length_r, ConfirmationSpec, DensitySpec,
};
use crate::types::Slot;

/// `ℓ_ε` as a function of `ε` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EllTable {
    /// `c · ln(1/ε)`.
    LogInverse { c: f64 },
    /// `c · ε^(−exponent)`.
    Power { c: f64, exponent: f64 },
    /// `c / ε`.
    Inverse { c: f64 },
    /// Measured points `(ε, ℓ)`; a query uses the row with the largest `ε`
    /// not above it.
    Tabulated { rows: Vec<(f64, f64)> },
}

impl EllTable {
    pub fn ell(&self, epsilon: f64) -> Option<f64> {
        match self {
            EllTable::LogInverse { c } => Some(c * (1.0 / epsilon).ln()),
            EllTable::Power { c, exponent } => Some(c * epsilon.powf(-exponent)),
            EllTable::Inverse { c } => Some(c / epsilon),
            EllTable::Tabulated { rows } => rows
                .iter()
                .filter(|r| r.0 <= epsilon)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|r| r.1),
        }
    }

    /// A finite-grid check of `ℓ_ε < α/ε` for small `ε`: over
    /// `ε = 10⁻², 10⁻³, …, 10⁻¹²`, `ε·ℓ_ε` must strictly decrease and end
    /// below 0.01. Grid points the table does not cover are skipped; at
    /// least two must remain.
    pub fn check_precondition(&self) -> Result<()> {
        let pts: Vec<(f64, f64)> = (2..=12)
            .map(|e| 10f64.powi(-e))
            .filter_map(|eps| self.ell(eps).map(|l| (eps, eps * l)))
            .collect();
        if pts.len() < 2 {
            return Err(Error::Precondition(
                "the ℓ table covers fewer than two grid points in [1e-12, 1e-2]".into(),
            ));
        }
        if let Some(w) = pts.windows(2).find(|w| w[1].1 >= w[0].1) {
            return Err(Error::Precondition(format!(
                "ε·ℓ_ε does not shrink: {} at ε = {:e}, {} at ε = {:e}",
                w[0].1, w[0].0, w[1].1, w[1].0
            )));
        }
        let last = pts.last().expect("two points");
        if last.1 >= 0.01 {
            return Err(Error::Precondition(format!(
                "ε·ℓ_ε = {} at ε = {:e} is not below 0.01",
                last.1, last.0
            )));
        }
        Ok(())
    }
}

/// First `n` past which `ℓ_{ε₀/2n} < α n` holds for every larger `n`, when the
/// table's form makes that decidable.
pub fn union_bound_sublinearity(table: &EllTable, epsilon0: f64, alpha: f64) -> Option<u64> {
    let ell = |n: u64| table.ell(epsilon0 / (2.0 * n as f64));
    let holds = |n: u64| ell(n).is_some_and(|l| l < alpha * n as f64);
    // Beyond `from` the slack α n − ℓ(n) is increasing.
    let from = match *table {
        EllTable::LogInverse { c } => (c / alpha).ceil().max(1.0) as u64,
        EllTable::Power { c, exponent } if exponent < 1.0 => {
            let k = c * (2.0 / epsilon0).powf(exponent);
            ((exponent * k / alpha).powf(1.0 / (1.0 - exponent)).ceil()).max(1.0) as u64
        }
        _ => return None,
    };
    let mut hi = from;
    while !holds(hi) {
        hi = hi.checked_mul(2)?;
    }
    let mut lo = from;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublinearityCert {
    pub alpha: f64,
    /// `ℓ′ < α n` for every `n ≥ bound`.
    pub bound: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionBoundPlan {
    pub epsilon0: f64,
    /// `n = |D₀|`.
    pub n: u64,
    /// `ε₁ = ε₀ / 2n`, exactly, as `numerator/denominator` of the decimal `ε₀`.
    pub epsilon1_exact: String,
    pub epsilon1: f64,
    /// `ℓ_{ε₁}`, emitted as the uniform bound `ℓ′_{ε₀, D₀}`.
    pub ell1: f64,
    /// `|D₁| = ⌊n + ℓ_{ε₁}⌋ + 1`.
    pub duration1: u64,
    pub sublinearity: Vec<SublinearityCert>,
}

/// `ε₁ = ε₀/2n` as an exact rational.
pub fn epsilon1_exact(epsilon0: f64, n: u64) -> BigRational {
    decimal_ratio(epsilon0) / BigRational::from_integer((2 * n).into())
}

pub fn recalibrate_union_bound(
    epsilon0: f64,
    n: u64,
    table: &EllTable,
    alphas: &[f64],
) -> Result<UnionBoundPlan> {
    if !(epsilon0 > 0.0 && epsilon0 < 1.0) || n == 0 {
        return Err(Error::Precondition("need ε₀ in (0, 1) and |D₀| ≥ 1".into()));
    }
    table.check_precondition()?;
    let exact = epsilon1_exact(epsilon0, n);
    let epsilon1 = exact.to_f64().expect("finite");
    let ell1 = table
        .ell(epsilon1)
        .ok_or_else(|| Error::Precondition(format!("the ℓ table does not reach ε = {epsilon1:e}")))?;
    let sublinearity = alphas
        .iter()
        .filter_map(|&alpha| {
            union_bound_sublinearity(table, epsilon0, alpha).map(|bound| SublinearityCert { alpha, bound })
        })
        .collect();
    Ok(UnionBoundPlan {
        epsilon0,
        n,
        epsilon1_exact: format!("{}/{}", exact.numer(), exact.denom()),
        epsilon1,
        ell1,
        duration1: (n as f64 + ell1).floor() as u64 + 1,
        sublinearity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificatePlan {
    pub epsilon: f64,
    /// `ε′ = ε/4`.
    pub epsilon_prime: f64,
    pub theta: f64,
    /// `ℓ_{ε′, D}` supplied by the caller.
    pub ell: Slot,
    pub r: u64,
    pub threshold: u32,
    /// `ℓ + r`.
    pub spacing: Slot,
    /// `(t_i, t_i*)` with `t_i = i · spacing` and `t_i* = t_i + r`.
    pub grid: Vec<(Slot, Slot)>,
    pub rule: ConfirmationSpec,
    /// Uniform liveness bound `ℓ′ = ℓ + 2r` of the new rule.
    pub ell_prime: Slot,
}

impl CertificatePlan {
    /// The base instance running the new confirmation rule.
    pub fn apply(&self, base: &ExecutionConfig) -> ExecutionConfig {
        ExecutionConfig {
            confirmation: self.rule.clone(),
            ..base.clone()
        }
    }
}

/// Builds the density rule for `base` at security `ε`, given `ℓ_{ε/4, D}`.
pub fn build_certificate_recalibration(base: &ExecutionConfig, ell: Slot) -> Result<CertificatePlan> {
    let s = base.setting;
    if s.sizing != Sizing::Sized {
        return Err(Error::SettingMismatch("the density certificate needs a sized pool".into()));
    }
    if s.timing != Timing::Timed {
        return Err(Error::SettingMismatch("the density certificate needs timestamps".into()));
    }
    let PermitterSpec::Pos { slot_rate } = base.permitter else {
        return Err(Error::SettingMismatch("the density certificate needs the slot-leader permitter".into()));
    };
    let AdversaryBound::Domination { theta } = base.pool.adversary_bound else {
        return Err(Error::SettingMismatch("the density certificate needs a domination bound Θ".into()));
    };
    certificate_plan(base.epsilon, theta, slot_rate, base.duration, ell)
}

pub fn certificate_plan(
    epsilon: f64,
    theta: f64,
    slot_rate: f64,
    duration: Slot,
    ell: Slot,
) -> Result<CertificatePlan> {
    let epsilon_prime = epsilon / 4.0;
    let r = interval_length_r(theta, epsilon_prime, slot_rate, duration)?;
    let threshold = density_threshold(theta, slot_rate, r)?;
    let spacing = ell + r;
    let grid = (1..)
        .map(|i| (i * spacing, i * spacing + r))
        .take_while(|&(_, end)| end <= duration)
        .collect();
    Ok(CertificatePlan {
        epsilon,
        epsilon_prime,
        theta,
        ell,
        r,
        threshold,
        spacing,
        grid,
        rule: ConfirmationSpec::Density(DensitySpec { theta, epsilon_prime, ell }),
        ell_prime: ell + 2 * r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::{pos, pow};
    use crate::protocols::DensityParams;

    #[test]
    fn epsilon_one_example() {
        let p = recalibrate_union_bound(0.1, 10, &EllTable::LogInverse { c: 5.0 }, &[]).unwrap();
        assert_eq!(p.epsilon1_exact, "1/200");
        assert_eq!(p.epsilon1, 0.005);
    }

    #[test]
    fn log_table_example() {
        let p = recalibrate_union_bound(0.1, 1000, &EllTable::LogInverse { c: 5.0 }, &[0.1]).unwrap();
        assert!((p.ell1 - 5.0 * 20000f64.ln()).abs() < 1e-9);
        assert!((p.ell1 - 49.5).abs() < 0.05);
        assert!(p.ell1 < 1000.0);
        assert_eq!(p.duration1, 1050);
        let bound = p.sublinearity[0].bound;
        let ell = |n: u64| 5.0 * (2.0 * n as f64 / 0.1).ln();
        assert!(ell(bound) < 0.1 * bound as f64);
        assert!(bound == 50 || ell(bound - 1) >= 0.1 * (bound - 1) as f64);
    }

    #[test]
    fn inverse_table_rejected() {
        let e = recalibrate_union_bound(0.1, 10, &EllTable::Inverse { c: 1.0 }, &[]);
        assert!(matches!(e, Err(Error::Precondition(_))));
        assert!(EllTable::Power { c: 1.0, exponent: 0.5 }.check_precondition().is_ok());
        assert!(EllTable::Power { c: 1.0, exponent: 1.5 }.check_precondition().is_err());
    }

    #[test]
    fn tabulated_lookup_is_conservative() {
        let t = EllTable::Tabulated { rows: vec![(0.1, 10.0), (0.01, 20.0), (1e-6, 60.0), (1e-12, 140.0)] };
        assert_eq!(t.ell(0.05), Some(20.0));
        assert_eq!(t.ell(1e-13), None);
        assert!(t.check_precondition().is_ok());
    }

    #[test]
    fn certificate_plan_grid() {
        let p = certificate_plan(0.2, 1.5, 0.5, 20_000, 60).unwrap();
        assert_eq!(p.epsilon_prime, 0.05);
        assert_eq!(p.spacing, p.ell + p.r);
        for (i, &(t, ts)) in p.grid.iter().enumerate() {
            assert_eq!(t, (i as u64 + 1) * p.spacing);
            assert_eq!(ts - t, p.r);
        }
        assert_eq!(p.ell_prime, 60 + 2 * p.r);
        let ConfirmationSpec::Density(d) = &p.rule else { panic!() };
        let params = DensityParams::new(d, 0.5, 20_000).unwrap();
        assert_eq!((params.r, params.threshold), (p.r, p.threshold));
        assert_eq!(params.intervals as usize, p.grid.len());
    }

    #[test]
    fn ell_prime_is_sublinear_over_a_grid() {
        for d in [10_000u64, 100_000, 1_000_000, 10_000_000] {
            let p = certificate_plan(0.2, 1.5, 0.5, d, 60).unwrap();
            if d >= 100_000 {
                assert!((p.ell_prime as f64) < 0.1 * d as f64, "{d}: {}", p.ell_prime);
            }
        }
    }

    #[test]
    fn setting_mismatch() {
        let mut c = pos(100, &[1.0], 0.5, 2);
        assert!(matches!(build_certificate_recalibration(&c, 10), Err(Error::SettingMismatch(_))));
        c.pool.adversary_bound = AdversaryBound::Domination { theta: 1.5 };
        assert!(build_certificate_recalibration(&c, 10).is_ok());
        c.setting.sizing = Sizing::Unsized;
        assert!(matches!(build_certificate_recalibration(&c, 10), Err(Error::SettingMismatch(_))));
        assert!(build_certificate_recalibration(&pow(100, &[1.0], 0.5, 2), 10).is_err());
    }
}
