//! Growth intervals, liveness and uniform liveness estimates, and empirical
//! calibration of `ℓ`.
//!
//! With `L_p(t)` the confirmed length of honest processor `p` after slot `t`,
//! `l₁(t₁) = max{L_p(s) : s ≤ t₁}` and `l₂(t₂) = min_p L_p(t₂)`. An interval is
//! a growth interval when `l₂ > l₁`. It qualifies for `ℓ` when `t₂ − t₁ ≥ ℓ`
//! and every slot in it is synchronous.

use serde::{Deserialize, Serialize};

use super::replay::Replay;
use super::stats::Estimate;
use crate::error::Result;
use crate::network::SynchronySchedule;
use crate::transcript::Transcript;
use crate::types::Slot;

/// `l₁` and `l₂` for every slot of one execution.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthSeries {
    /// Index `t − 1`.
    pub l1: Vec<u32>,
    pub l2: Vec<u32>,
    /// Maximal synchronous runs `[a, b]` within the executed slots.
    pub segments: Vec<(Slot, Slot)>,
}

impl GrowthSeries {
    pub fn new(tr: &Transcript) -> Result<Self> {
        let r = Replay::new(tr)?;
        let n = tr.slots_run as usize;
        let mut l1 = vec![0u32; n];
        let mut l2 = vec![u32::MAX; n];
        for &p in &r.honest {
            for (i, len) in r.length_series(p).into_iter().enumerate() {
                l1[i] = l1[i].max(len);
                l2[i] = l2[i].min(len);
            }
        }
        for i in 1..n {
            l1[i] = l1[i].max(l1[i - 1]);
        }
        if r.honest.is_empty() {
            l2.iter_mut().for_each(|x| *x = 0);
        }
        let cfg = tr.config();
        let sched = SynchronySchedule::new(&cfg.schedule, cfg.duration, cfg.delta)?;
        let segments = sched
            .sync_segments()
            .into_iter()
            .filter(|&(a, _)| a <= tr.slots_run)
            .map(|(a, b)| (a, b.min(tr.slots_run)))
            .collect();
        Ok(Self { l1, l2, segments })
    }

    pub fn l1(&self, t: Slot) -> u32 {
        self.l1[t as usize - 1]
    }

    pub fn l2(&self, t: Slot) -> u32 {
        self.l2[t as usize - 1]
    }

    /// True when every qualifying interval for `ell` is a growth interval.
    pub fn uniform_growth(&self, ell: Slot) -> bool {
        self.segments.iter().all(|&(a, b)| {
            if b < a + ell {
                return true;
            }
            // min over t₂ in [t₁ + ℓ, b] of l₂, swept from the right.
            let mut suffix_min = u32::MAX;
            let mut t2 = b;
            for t1 in (a..=b - ell).rev() {
                while t2 >= t1 + ell {
                    suffix_min = suffix_min.min(self.l2(t2));
                    if t2 == 0 {
                        break;
                    }
                    t2 -= 1;
                }
                if suffix_min <= self.l1(t1) {
                    return false;
                }
            }
            true
        })
    }

    /// Smallest `ℓ ≥ 1` for which [`Self::uniform_growth`] holds. Intervals
    /// of length `|D|` never fit, so the result is at most the run length.
    pub fn ell_star(&self) -> Slot {
        let (mut lo, mut hi) = (1, self.l1.len().max(1) as Slot);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.uniform_growth(mid) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    /// Qualifying intervals `[t₁, t₁ + ℓ]`.
    pub fn intervals(&self, ell: Slot) -> Vec<(Slot, Slot)> {
        let mut out = Vec::new();
        for &(a, b) in &self.segments {
            if b >= a + ell {
                out.extend((a..=b - ell).map(|t1| (t1, t1 + ell)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub t1: Slot,
    pub t2: Slot,
    pub l1: u32,
    pub l2: u32,
    pub is_growth: bool,
}

/// Every qualifying interval of one execution for `ell`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub ell: Slot,
    pub records: Vec<GrowthRecord>,
    /// All qualifying intervals, of any length `≥ ℓ`, are growth intervals.
    pub uniform: bool,
}

pub fn growth_report(tr: &Transcript, ell: Slot) -> Result<GrowthReport> {
    let s = GrowthSeries::new(tr)?;
    let records = s
        .intervals(ell)
        .into_iter()
        .map(|(t1, t2)| {
            let (l1, l2) = (s.l1(t1), s.l2(t2));
            GrowthRecord { t1, t2, l1, l2, is_growth: l2 > l1 }
        })
        .collect();
    Ok(GrowthReport { ell, records, uniform: s.uniform_growth(ell) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalFrequency {
    pub t1: Slot,
    pub t2: Slot,
    pub growth: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LivenessEstimate {
    pub ell: Slot,
    /// No interval qualifies (for example `ℓ ≥ |D|`).
    pub empty: bool,
    pub intervals: Vec<IntervalFrequency>,
    /// The interval with the lowest growth frequency.
    pub worst: Option<IntervalFrequency>,
    /// Fraction of trials in which every qualifying interval grew.
    pub uniform: Estimate,
}

/// Liveness over trials of one configuration. Intervals are taken from the
/// first trial; trials that stopped early count as failures on intervals
/// they did not reach.
pub fn measure_liveness(series: &[GrowthSeries], ell: Slot) -> LivenessEstimate {
    let intervals = series.first().map(|s| s.intervals(ell)).unwrap_or_default();
    let freq: Vec<IntervalFrequency> = intervals
        .iter()
        .map(|&(t1, t2)| IntervalFrequency {
            t1,
            t2,
            growth: Estimate::from_flags(series.iter().map(|s| {
                (t2 as usize) <= s.l2.len() && s.l2(t2) > s.l1(t1)
            })),
        })
        .collect();
    let worst = freq
        .iter()
        .min_by(|a, b| a.growth.point.total_cmp(&b.growth.point))
        .cloned();
    LivenessEstimate {
        ell,
        empty: freq.is_empty(),
        intervals: freq,
        worst,
        uniform: Estimate::from_flags(series.iter().map(|s| s.uniform_growth(ell))),
    }
}

/// The smallest `ℓ` such that at least a `1 − ε` fraction of the trials are
/// uniformly live for it: the `⌈(1 − ε)n⌉`-th smallest per-trial `ℓ*`.
pub fn calibrate_ell(series: &[GrowthSeries], epsilon: f64) -> Option<Slot> {
    let mut stars: Vec<Slot> = series.iter().map(|s| s.ell_star()).collect();
    if stars.is_empty() {
        return None;
    }
    stars.sort_unstable();
    let need = ((1.0 - epsilon) * stars.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Some(stars[need.min(stars.len()) - 1])
}
