//! Resource pools: per-key balances over time and message state.
//!
//! Balances are configured as decimals. Floating point is used on the hot path
//! (permitter draws); the domination and q-bound checks reparse the same
//! decimals as exact rationals so strict inequalities at the boundary are
//! decided exactly.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Sizing;
use crate::error::ConfigError;
use crate::ledger::{Idx, Ledger};
use crate::rng::{SeedTree, Stream};
use crate::types::{ProcessorId, PublicKey, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolFamily {
    /// Constant hash rate per key, independent of the message state.
    Hashrate,
    /// Stake allocated at genesis, plus `coinbase_reward` for every block a key
    /// has on the longest chain of the message state with timestamp at most
    /// `t - lookback`.
    Stake {
        #[serde(default)]
        coinbase_reward: f64,
        #[serde(default)]
        lookback: u64,
    },
}

/// Multiplier applied to every roster balance over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    #[default]
    Constant,
    /// Factor 1 before slot `at`, `factor` from `at` on.
    Step { at: Slot, factor: f64 },
    /// Linear from 1 at slot 1 to `factor` at the last slot.
    Drift { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryBound {
    /// Adversary holds at most a `q` fraction of the total.
    Fraction { q: f64 },
    /// Honest keys hold strictly more than `theta` times the adversary's keys.
    Domination { theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub family: PoolFamily,
    #[serde(default)]
    pub profile: Profile,
    /// `[α₀, α₁]`; required in the unsized setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    /// Unsized only: treat roster balances as relative weights and draw the
    /// hidden total inside the bounds.
    #[serde(default)]
    pub resample_total: bool,
    pub adversary_bound: AdversaryBound,
}

/// The chain of a message state that a balance is read from.
#[derive(Clone, Copy)]
pub struct ChainRef<'a> {
    pub ledger: &'a Ledger,
    pub tip: Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourcePool {
    sizing: Sizing,
    family: PoolFamily,
    profile: Profile,
    duration: Slot,
    bounds: Option<(f64, f64)>,
    /// Base allocation per key, sorted by key, zero entries omitted.
    alloc: Vec<(PublicKey, f64)>,
    /// The same allocation as exact decimals.
    alloc_exact: Vec<(PublicKey, BigRational)>,
    scale: BigRational,
}

/// Parses the shortest decimal rendering of `x` as an exact rational.
pub fn decimal_ratio(x: f64) -> BigRational {
    assert!(x.is_finite(), "non-finite balance {x}");
    let s = format!("{x}");
    let (neg, s) = s.strip_prefix('-').map_or((false, s.as_str()), |r| (true, r));
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    let digits: BigInt = format!("{int}{frac}").parse().expect("decimal digits");
    let denom = BigInt::from(10u32).pow(frac.len() as u32);
    let r = BigRational::new(digits, denom);
    if neg {
        -r
    } else {
        r
    }
}

impl ResourcePool {
    /// Builds the pool for a roster of `(processor, balance, key count)`.
    pub fn new(
        spec: &PoolSpec,
        sizing: Sizing,
        roster: &[(ProcessorId, f64, u32)],
        duration: Slot,
    ) -> Result<Self, ConfigError> {
        if let PoolFamily::Stake { coinbase_reward, .. } = spec.family {
            if !(coinbase_reward >= 0.0 && coinbase_reward.is_finite()) {
                return Err(ConfigError::field("pool.family.coinbase_reward", "must be >= 0"));
            }
            if coinbase_reward > 0.0 && sizing == Sizing::Unsized {
                return Err(ConfigError::axis(
                    "sizing",
                    "coinbase rewards make the total unbounded; not allowed when unsized",
                ));
            }
        }
        match spec.profile {
            Profile::Constant => {}
            Profile::Step { factor, .. } | Profile::Drift { factor } => {
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(ConfigError::field("pool.profile.factor", "must be > 0"));
                }
            }
        }
        match spec.adversary_bound {
            AdversaryBound::Fraction { q } if !(0.0..=1.0).contains(&q) => {
                return Err(ConfigError::field("pool.adversary_bound.q", "must lie in [0, 1]"));
            }
            AdversaryBound::Domination { theta } if !(theta > 1.0) => {
                return Err(ConfigError::field("pool.adversary_bound.theta", "must be > 1"));
            }
            _ => {}
        }
        let mut alloc = Vec::new();
        let mut alloc_exact = Vec::new();
        for &(p, bal, keys) in roster {
            if !(bal >= 0.0 && bal.is_finite()) {
                return Err(ConfigError::field("roster.balance", format!("{p}: must be >= 0")));
            }
            if bal == 0.0 {
                continue;
            }
            if keys == 0 {
                return Err(ConfigError::field("roster.keys", format!("{p}: must be >= 1")));
            }
            let exact = decimal_ratio(bal) / BigRational::from_integer(keys.into());
            for i in 0..keys {
                let k = PublicKey::new(p, i);
                alloc.push((k, bal / keys as f64));
                alloc_exact.push((k, exact.clone()));
            }
        }
        alloc.sort_by_key(|a| a.0);
        alloc_exact.sort_by_key(|a| a.0);
        if alloc.is_empty() {
            return Err(ConfigError::field(
                "roster.balance",
                "total resource balance must be positive",
            ));
        }
        let bounds = match (sizing, spec.bounds) {
            (Sizing::Unsized, None) => {
                return Err(ConfigError::field("pool.bounds", "required in the unsized setting"));
            }
            (Sizing::Unsized, Some([a0, a1])) => {
                if !(a0 > 0.0) {
                    return Err(ConfigError::field("pool.bounds", "α₀ must be > 0"));
                }
                if !(a1 >= a0 && a1.is_finite()) {
                    return Err(ConfigError::field("pool.bounds", "α₁ must be >= α₀"));
                }
                Some((a0, a1))
            }
            (Sizing::Sized, _) => None,
        };
        if spec.resample_total && sizing == Sizing::Sized {
            return Err(ConfigError::axis("sizing", "resample_total needs an unsized pool"));
        }
        let pool = Self {
            sizing,
            family: spec.family.clone(),
            profile: spec.profile.clone(),
            duration,
            bounds,
            alloc,
            alloc_exact,
            scale: BigRational::one(),
        };
        if sizing == Sizing::Unsized && !spec.resample_total {
            pool.check_bounds()?;
        }
        Ok(pool)
    }

    fn factor_range(&self) -> (f64, f64) {
        match self.profile {
            Profile::Constant => (1.0, 1.0),
            Profile::Step { at, factor } if at <= self.duration => (factor.min(1.0), factor.max(1.0)),
            Profile::Step { .. } => (1.0, 1.0),
            Profile::Drift { factor } => (factor.min(1.0), factor.max(1.0)),
        }
    }

    fn check_bounds(&self) -> Result<(), ConfigError> {
        let (a0, a1) = self.bounds.expect("unsized pool has bounds");
        let base = self.base_total();
        let (lo, hi) = self.factor_range();
        // Tolerate rounding of exactly-representable boundary totals.
        let tol = 1e-12 * a1.max(1.0);
        if base * lo < a0 - tol || base * hi > a1 + tol {
            return Err(ConfigError::field(
                "pool.bounds",
                format!(
                    "total {:.6}..{:.6} leaves [{a0}, {a1}]",
                    base * lo,
                    base * hi
                ),
            ));
        }
        Ok(())
    }

    pub fn sizing(&self) -> Sizing {
        self.sizing
    }

    pub fn family(&self) -> &PoolFamily {
        &self.family
    }

    /// `α₀` in the unsized setting.
    pub fn lower_bound(&self) -> Option<f64> {
        self.bounds.map(|b| b.0)
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    fn base_total(&self) -> f64 {
        self.alloc.iter().map(|a| a.1).sum()
    }

    pub fn factor(&self, t: Slot) -> f64 {
        match self.profile {
            Profile::Constant => 1.0,
            Profile::Step { at, factor } => {
                if t >= at {
                    factor
                } else {
                    1.0
                }
            }
            Profile::Drift { factor } => {
                if self.duration <= 1 {
                    1.0
                } else {
                    let x = (t.clamp(1, self.duration) - 1) as f64 / (self.duration - 1) as f64;
                    1.0 + (factor - 1.0) * x
                }
            }
        }
    }

    fn factor_exact(&self, t: Slot) -> BigRational {
        match self.profile {
            Profile::Constant => BigRational::one(),
            Profile::Step { at, factor } => {
                if t >= at {
                    decimal_ratio(factor)
                } else {
                    BigRational::one()
                }
            }
            Profile::Drift { factor } => {
                if self.duration <= 1 {
                    BigRational::one()
                } else {
                    let x = BigRational::new(
                        BigInt::from(t.clamp(1, self.duration) - 1),
                        BigInt::from(self.duration - 1),
                    );
                    BigRational::one() + (decimal_ratio(factor) - BigRational::one()) * x
                }
            }
        }
    }

    fn scale_f64(&self) -> f64 {
        use num_traits::ToPrimitive;
        self.scale.to_f64().unwrap_or(1.0)
    }

    /// Coinbase counts per key along the chain of `m`, or empty when the
    /// family has no rewards.
    fn coinbase_counts(&self, t: Slot, m: Option<ChainRef<'_>>) -> Vec<(PublicKey, u64)> {
        let PoolFamily::Stake {
            coinbase_reward,
            lookback,
        } = self.family
        else {
            return Vec::new();
        };
        let Some(m) = m else { return Vec::new() };
        if coinbase_reward == 0.0 {
            return Vec::new();
        }
        let horizon = t.saturating_sub(lookback);
        let mut counts: std::collections::BTreeMap<PublicKey, u64> = Default::default();
        let mut cur = Some(m.tip);
        while let Some(c) = cur {
            let e = m.ledger.entry(c);
            if !e.msg.is_genesis() && e.msg.timestamp.unwrap_or(0) <= horizon {
                *counts.entry(e.msg.signer).or_default() += 1;
            }
            cur = e.parent;
        }
        counts.into_iter().collect()
    }

    /// Every key with nonzero balance at `(t, M)`, sorted by key.
    pub fn key_balances(&self, t: Slot, m: Option<ChainRef<'_>>) -> Vec<(PublicKey, f64)> {
        let f = self.factor(t) * self.scale_f64();
        let mut out: Vec<(PublicKey, f64)> = self.alloc.iter().map(|&(k, b)| (k, b * f)).collect();
        if let PoolFamily::Stake { coinbase_reward, .. } = self.family {
            for (k, n) in self.coinbase_counts(t, m) {
                let add = coinbase_reward * n as f64 * f;
                match out.binary_search_by_key(&k, |a| a.0) {
                    Ok(i) => out[i].1 += add,
                    Err(i) => out.insert(i, (k, add)),
                }
            }
        }
        out
    }

    /// `R(U, t, M)`.
    pub fn balance(&self, key: PublicKey, t: Slot, m: Option<ChainRef<'_>>) -> f64 {
        let f = self.factor(t) * self.scale_f64();
        let base = self
            .alloc
            .binary_search_by_key(&key, |a| a.0)
            .map_or(0.0, |i| self.alloc[i].1);
        let reward = match self.family {
            PoolFamily::Stake { coinbase_reward, .. } if coinbase_reward > 0.0 => {
                let n = self
                    .coinbase_counts(t, m)
                    .into_iter()
                    .find(|c| c.0 == key)
                    .map_or(0, |c| c.1);
                coinbase_reward * n as f64
            }
            _ => 0.0,
        };
        (base + reward) * f
    }

    /// `T(t, M)`.
    pub fn total(&self, t: Slot, m: Option<ChainRef<'_>>) -> f64 {
        self.key_balances(t, m).iter().map(|a| a.1).sum()
    }

    /// Exact balances of every nonzero key at `(t, M)`.
    pub fn key_balances_exact(
        &self,
        t: Slot,
        m: Option<ChainRef<'_>>,
    ) -> Vec<(PublicKey, BigRational)> {
        let f = self.factor_exact(t) * &self.scale;
        let mut out: Vec<(PublicKey, BigRational)> = self
            .alloc_exact
            .iter()
            .map(|(k, b)| (*k, b * &f))
            .collect();
        if let PoolFamily::Stake { coinbase_reward, .. } = self.family {
            let r = decimal_ratio(coinbase_reward);
            for (k, n) in self.coinbase_counts(t, m) {
                let add = &r * BigRational::from_integer(n.into()) * &f;
                match out.binary_search_by_key(&k, |a| a.0) {
                    Ok(i) => out[i].1 += add,
                    Err(i) => out.insert(i, (k, add)),
                }
            }
        }
        out
    }

    /// Checks conditions (a)-(c) at one point: nonzero balances only for keys
    /// owned by a listed processor, finitely many of them (by construction),
    /// and a positive total.
    pub fn check_conditions(
        &self,
        t: Slot,
        m: Option<ChainRef<'_>>,
        owners: &BTreeSet<ProcessorId>,
    ) -> Result<(), String> {
        let bals = self.key_balances_exact(t, m);
        if let Some((k, _)) = bals.iter().find(|(k, _)| !owners.contains(&k.owner)) {
            return Err(format!("key {k} has balance but no owner"));
        }
        if bals.iter().any(|(_, b)| b.is_negative()) {
            return Err("negative balance".into());
        }
        let total: BigRational = bals.iter().map(|a| &a.1).sum();
        if !total.is_positive() {
            return Err(format!("total balance is zero at slot {t}"));
        }
        if let (Sizing::Unsized, Some((a0, a1))) = (self.sizing, self.bounds) {
            if total < decimal_ratio(a0) || total > decimal_ratio(a1) {
                return Err(format!("total outside [{a0}, {a1}] at slot {t}"));
            }
        }
        Ok(())
    }
}

fn sum_owned(bals: &[(PublicKey, BigRational)], set: &BTreeSet<ProcessorId>) -> BigRational {
    bals.iter()
        .filter(|(k, _)| set.contains(&k.owner))
        .map(|a| &a.1)
        .sum()
}

/// A realized `(t, M)` at which a pool is evaluated.
pub type EvalPoint<'a> = (Slot, Option<ChainRef<'a>>);

/// True iff the adversary's keys hold at most a `q` fraction of the total at
/// every listed point.
pub fn is_q_bounded(
    pool: &ResourcePool,
    adversary: &BTreeSet<ProcessorId>,
    q: f64,
    points: &[EvalPoint<'_>],
) -> bool {
    let q = decimal_ratio(q);
    points.iter().all(|&(t, m)| {
        let bals = pool.key_balances_exact(t, m);
        let total: BigRational = bals.iter().map(|a| &a.1).sum();
        sum_owned(&bals, adversary) <= &q * total
    })
}

/// True iff the keys of `u1` hold strictly more than `theta` times the keys of
/// `u2` at every listed point.
pub fn dominates(
    pool: &ResourcePool,
    u1: &BTreeSet<ProcessorId>,
    u2: &BTreeSet<ProcessorId>,
    theta: f64,
    points: &[EvalPoint<'_>],
) -> bool {
    let theta = decimal_ratio(theta);
    points.iter().all(|&(t, m)| {
        let bals = pool.key_balances_exact(t, m);
        sum_owned(&bals, u1) > &theta * sum_owned(&bals, u2)
    })
}

/// Draws a hidden pool for the unsized setting: roster balances are relative
/// weights and the base total is uniform over the range that keeps `T` inside
/// `[α₀, α₁]` for the whole profile.
pub fn sample_unsized_pool(
    spec: &PoolSpec,
    roster: &[(ProcessorId, f64, u32)],
    duration: Slot,
    seed: u64,
) -> Result<ResourcePool, ConfigError> {
    let mut pool = ResourcePool::new(spec, Sizing::Unsized, roster, duration)?;
    let (a0, a1) = pool.bounds.expect("unsized pool has bounds");
    let (lo_f, hi_f) = pool.factor_range();
    let (lo, hi) = (a0 / lo_f, a1 / hi_f);
    if lo > hi * (1.0 + 1e-12) {
        return Err(ConfigError::field(
            "pool.profile",
            format!("profile range {lo_f}..{hi_f} cannot fit inside [{a0}, {a1}]"),
        ));
    }
    let target = if hi > lo {
        SeedTree::new(seed).rng(Stream::Pool).random_range(lo..=hi)
    } else {
        lo
    };
    let exact_target =
        BigRational::from_float(target).unwrap_or_else(|| decimal_ratio(target));
    let base_exact: BigRational = pool.alloc_exact.iter().map(|a| &a.1).sum();
    pool.scale = if hi > lo {
        exact_target / base_exact
    } else {
        decimal_ratio(lo) / base_exact
    };
    if pool.scale.is_zero() {
        return Err(ConfigError::field("roster.balance", "weights sum to zero"));
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bound: AdversaryBound) -> PoolSpec {
        PoolSpec {
            family: PoolFamily::Hashrate,
            profile: Profile::Constant,
            bounds: None,
            resample_total: false,
            adversary_bound: bound,
        }
    }

    fn set(ids: &[u32]) -> BTreeSet<ProcessorId> {
        ids.iter().map(|&i| ProcessorId(i)).collect()
    }

    const FRAC: AdversaryBound = AdversaryBound::Fraction { q: 0.5 };

    #[test]
    fn decimal_parsing_is_exact() {
        assert_eq!(decimal_ratio(0.6), BigRational::new(6.into(), 10.into()));
        assert_eq!(decimal_ratio(1.5), BigRational::new(3.into(), 2.into()));
        assert_eq!(decimal_ratio(-2.0), BigRational::from_integer((-2).into()));
    }

    #[test]
    fn domination_is_strict() {
        let roster = [(ProcessorId(0), 0.6, 1), (ProcessorId(1), 0.4, 1)];
        let pool = ResourcePool::new(&spec(FRAC), Sizing::Sized, &roster, 10).unwrap();
        let pts = [(1, None), (10, None)];
        assert!(dominates(&pool, &set(&[0]), &set(&[1]), 1.4, &pts));
        assert!(!dominates(&pool, &set(&[0]), &set(&[1]), 1.5, &pts));
        assert!(!dominates(&pool, &set(&[0, 1]), &set(&[0, 1]), 1.01, &pts));
        assert!(dominates(&pool, &set(&[0]), &set(&[7]), 1000.0, &pts));
    }

    #[test]
    fn q_bound_cases() {
        let roster = [(ProcessorId(0), 0.9, 1), (ProcessorId(1), 0.1, 1)];
        let pool = ResourcePool::new(&spec(FRAC), Sizing::Sized, &roster, 10).unwrap();
        let pts = [(1, None)];
        assert!(is_q_bounded(&pool, &set(&[1]), 0.1, &pts));
        assert!(!is_q_bounded(&pool, &set(&[1]), 0.09, &pts));
        assert!(is_q_bounded(&pool, &set(&[0, 1]), 1.0, &pts));
        assert!(is_q_bounded(&pool, &set(&[5]), 0.0, &pts));
    }

    #[test]
    fn unsized_bounds_are_validated() {
        let mut s = spec(FRAC);
        let roster = [(ProcessorId(0), 1.0, 1)];
        assert!(ResourcePool::new(&s, Sizing::Unsized, &roster, 10).is_err());
        s.bounds = Some([0.0, 1.0]);
        assert!(ResourcePool::new(&s, Sizing::Unsized, &roster, 10).is_err());
        s.bounds = Some([1.0, 1.0]);
        let pool = ResourcePool::new(&s, Sizing::Unsized, &roster, 10).unwrap();
        assert!((1..=10).all(|t| pool.total(t, None) == 1.0));
        s.bounds = Some([2.0, 3.0]);
        assert!(ResourcePool::new(&s, Sizing::Unsized, &roster, 10).is_err());
    }

    #[test]
    fn sampled_step_profile_stays_in_bounds() {
        let mut s = spec(FRAC);
        s.bounds = Some([1.0, 2.0]);
        s.resample_total = true;
        s.profile = Profile::Step { at: 51, factor: 2.0 };
        let roster = [(ProcessorId(0), 3.0, 2), (ProcessorId(1), 1.0, 1)];
        let pool = sample_unsized_pool(&s, &roster, 100, 9).unwrap();
        assert!((pool.total(1, None) - 1.0).abs() < 1e-12);
        assert!((pool.total(100, None) - 2.0).abs() < 1e-12);
        let owners = set(&[0, 1]);
        for t in 1..=100 {
            pool.check_conditions(t, None, &owners).unwrap();
        }
        s.profile = Profile::Drift { factor: 1.5 };
        for seed in 0..20 {
            let p = sample_unsized_pool(&s, &roster, 100, seed).unwrap();
            for t in [1, 50, 100] {
                let tot = p.total(t, None);
                assert!((1.0 - 1e-9..=2.0 + 1e-9).contains(&tot), "{tot}");
            }
        }
    }

    #[test]
    fn balances_split_across_keys() {
        let roster = [(ProcessorId(3), 0.5, 2)];
        let pool = ResourcePool::new(&spec(FRAC), Sizing::Sized, &roster, 10).unwrap();
        assert_eq!(pool.balance(PublicKey::new(ProcessorId(3), 1), 4, None), 0.25);
        assert_eq!(pool.balance(PublicKey::new(ProcessorId(3), 2), 4, None), 0.0);
        assert_eq!(pool.balance(PublicKey::new(ProcessorId(4), 0), 4, None), 0.0);
    }

    #[test]
    fn zero_total_is_rejected() {
        let roster = [(ProcessorId(0), 0.0, 1)];
        assert!(ResourcePool::new(&spec(FRAC), Sizing::Sized, &roster, 10).is_err());
    }
}
