//! The density confirmation rule.
//!
//! Time is cut into a grid of intervals `I_i = [t_i, t_i + r]` with
//! `t_i = i * (ℓ + r)`. A chain of length `i` ending at leaf `L` is certified
//! when every block of the chain is older than `t_i` and the descendants of
//! `L` carry at least `θ` distinct timestamps inside `I_i`. A key set that is
//! dominated by a factor `Θ` produces fewer than `θ` leader slots in an
//! interval of length `r` except with small probability, while the dominating
//! set produces at least `θ`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::ledger::{Idx, Ledger};
use crate::types::{Message, MessageId, Slot};

/// Configuration of the density rule. `λ` and `|D|` come from the instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    /// `Θ`: honest keys hold more than `Θ` times the adversary's balance.
    pub theta: f64,
    /// `ε′`: failure budget of the rule.
    pub epsilon_prime: f64,
    /// Liveness interval `ℓ` of the base protocol; the grid gap between
    /// consecutive density intervals.
    pub ell: Slot,
}

/// Per-slot production rates `(h, a)` of the dominating and dominated key
/// sets at the domination boundary, for a slot-leader rate `λ`.
pub fn production_rates(theta: f64, slot_rate: f64) -> (f64, f64) {
    (slot_rate * theta / (1.0 + theta), slot_rate / (1.0 + theta))
}

fn gap(theta: f64, slot_rate: f64) -> f64 {
    let (h, a) = production_rates(theta, slot_rate);
    h - a
}

fn check_inputs(theta: f64, epsilon_prime: f64, slot_rate: f64) -> Result<(), ConfigError> {
    if !(theta > 1.0) {
        return Err(ConfigError::field("confirmation.theta", "Θ must exceed 1"));
    }
    if !(epsilon_prime > 0.0 && epsilon_prime < 1.0) {
        return Err(ConfigError::field("confirmation.epsilon_prime", "must lie in (0, 1)"));
    }
    if !(slot_rate > 0.0 && slot_rate <= 1.0) {
        return Err(ConfigError::field("permitter.slot_rate", "must lie in (0, 1]"));
    }
    Ok(())
}

/// The midpoint count `θ` between the expected production of the two key
/// sets over `r` slots. Infinite `Θ` gives half the honest expectation.
pub fn density_threshold(theta: f64, slot_rate: f64, r: u64) -> Result<u32, ConfigError> {
    check_inputs(theta, 0.5, slot_rate)?;
    let (h, a) = if theta.is_infinite() {
        (slot_rate, 0.0)
    } else {
        production_rates(theta, slot_rate)
    };
    Ok(((r as f64) * (h + a) / 2.0 - 1e-9).ceil().max(1.0) as u32)
}

/// Hoeffding bound on both tails, against the union-bound share of `ε′`.
fn budget_holds(r: u64, g: f64, epsilon_prime: f64, duration: Slot) -> bool {
    let intervals = duration.div_ceil(r).max(1) as f64;
    2.0 * (-(r as f64) * g * g / 2.0).exp() <= epsilon_prime / (2.0 * intervals)
}

/// Smallest `r` for which the honest shortfall and the adversary excess over
/// `θ` each stay below `exp(-r g² / 2)` and their sum fits the per-interval
/// share `ε′ / (2 ⌈|D| / r⌉)`.
pub fn interval_length_r(
    theta: f64,
    epsilon_prime: f64,
    slot_rate: f64,
    duration: Slot,
) -> Result<u64, ConfigError> {
    check_inputs(theta, epsilon_prime, slot_rate)?;
    let g = if theta.is_infinite() { slot_rate } else { gap(theta, slot_rate) };
    // The condition is monotone in r: the left side falls and the interval
    // count does not grow.
    let mut hi = 1u64;
    while !budget_holds(hi, g, epsilon_prime, duration) {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if budget_holds(mid, g, epsilon_prime, duration) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Closed-form upper bound `⌈(2/g²) ln(4|D|/ε′)⌉ ≥ r(|D|)`.
pub fn interval_length_upper(theta: f64, epsilon_prime: f64, slot_rate: f64, duration: Slot) -> u64 {
    let g = gap(theta, slot_rate);
    (2.0 / (g * g) * (4.0 * duration as f64 / epsilon_prime).ln()).ceil() as u64
}

/// A duration `N` with `r(|D|) < α |D|` for every `|D| ≥ N`.
pub fn sublinearity_bound(theta: f64, epsilon_prime: f64, slot_rate: f64, alpha: f64) -> u64 {
    let g = gap(theta, slot_rate);
    let c = 2.0 / (g * g);
    // Past c/α the slack α D - c ln(4D/ε′) is increasing.
    let mut n = (c / alpha).ceil() as u64;
    while alpha * n as f64 <= c * (4.0 * n as f64 / epsilon_prime).ln() + 1.0 {
        n = (n + 1).max(n + n / 64);
    }
    // Step back to the first qualifying value.
    let mut lo = (c / alpha).ceil() as u64;
    while lo < n {
        let mid = lo + (n - lo) / 2;
        if alpha * mid as f64 > c * (4.0 * mid as f64 / epsilon_prime).ln() + 1.0 {
            n = mid;
        } else {
            lo = mid + 1;
        }
    }
    n
}

/// The rule's derived parameters for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    pub theta: f64,
    pub epsilon_prime: f64,
    pub slot_rate: f64,
    pub duration: Slot,
    pub ell: Slot,
    /// Interval length `r`.
    pub r: u64,
    /// Count threshold `θ`.
    pub threshold: u32,
    /// Number of grid intervals that fit inside the duration.
    pub intervals: u32,
}

impl DensityParams {
    pub fn new(spec: &DensitySpec, slot_rate: f64, duration: Slot) -> Result<Self, ConfigError> {
        if spec.ell < 1 {
            return Err(ConfigError::field("confirmation.ell", "must be >= 1"));
        }
        let r = interval_length_r(spec.theta, spec.epsilon_prime, slot_rate, duration)?;
        let threshold = density_threshold(spec.theta, slot_rate, r)?;
        let spacing = spec.ell + r;
        let intervals = (duration.saturating_sub(r) / spacing) as u32;
        Ok(Self {
            theta: spec.theta,
            epsilon_prime: spec.epsilon_prime,
            slot_rate,
            duration,
            ell: spec.ell,
            r,
            threshold,
            intervals,
        })
    }

    pub fn spacing(&self) -> Slot {
        self.ell + self.r
    }

    /// `t_i`.
    pub fn start(&self, i: u32) -> Slot {
        i as Slot * self.spacing()
    }

    /// The grid interval containing timestamp `ts`, if any.
    pub fn interval_of(&self, ts: Slot) -> Option<u32> {
        let s = self.spacing();
        let i = ts / s;
        (i >= 1 && i <= self.intervals as u64 && ts - i * s <= self.r).then_some(i as u32)
    }
}

/// Incremental evaluation of the rule over one growing message state.
#[derive(Debug, Clone)]
pub struct DensityState {
    counts: HashMap<(u32, Idx), HashSet<Slot>>,
    best: Option<(u32, Idx)>,
}

impl DensityState {
    pub fn new() -> Self {
        Self {
            counts: HashMap::new(),
            best: None,
        }
    }

    /// Accounts for a block that just became rooted in the state.
    pub fn observe(&mut self, params: &DensityParams, ledger: &Ledger, b: Idx) {
        let e = ledger.entry(b);
        let Some(ts) = e.msg.timestamp else { return };
        let Some(i) = params.interval_of(ts) else { return };
        if e.height <= i {
            return;
        }
        let leaf = ledger.ancestor_at(b, i);
        if ledger.entry(leaf).max_ts >= params.start(i) {
            return;
        }
        let set = self.counts.entry((i, leaf)).or_default();
        if set.insert(ts) && set.len() == params.threshold as usize {
            let better = match self.best {
                None => true,
                Some((j, l)) => i > j || (i == j && ledger.id(leaf) < ledger.id(l)),
            };
            if better {
                self.best = Some((i, leaf));
            }
        }
    }

    /// Leaf of the confirmed chain, or `None` for the empty chain.
    pub fn confirmed(&self) -> Option<Idx> {
        self.best.map(|b| b.1)
    }
}

impl Default for DensityState {
    fn default() -> Self {
        Self::new()
    }
}

/// Self-contained evidence for a density confirmation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityWitness {
    pub interval: u32,
    pub leaf: MessageId,
    /// Genesis to leaf; plays the role of the base set.
    pub chain: Vec<MessageId>,
    /// Descendants of the leaf with `threshold` distinct timestamps in the
    /// interval.
    pub extension: Vec<MessageId>,
}

/// Block relations over an arbitrary message set. Genesis is implicit.
pub(crate) struct SetIndex<'a> {
    pub msgs: HashMap<MessageId, &'a Message>,
    pub rooted: HashMap<MessageId, Rooted>,
}

#[derive(Debug, Clone)]
pub(crate) struct Rooted {
    pub height: u32,
    pub max_ts: Slot,
    pub parent: Option<MessageId>,
}

impl<'a> SetIndex<'a> {
    pub fn new(set: &[&'a Message]) -> Self {
        let mut msgs: HashMap<MessageId, &'a Message> =
            set.iter().filter(|m| m.is_block()).map(|m| (m.id, *m)).collect();
        let g = MessageId::genesis();
        msgs.remove(&g);
        let mut rooted = HashMap::new();
        rooted.insert(
            g,
            Rooted {
                height: 0,
                max_ts: 0,
                parent: None,
            },
        );
        let mut children: HashMap<MessageId, Vec<MessageId>> = HashMap::new();
        for m in msgs.values() {
            if let Some(p) = m.parent() {
                children.entry(p).or_default().push(m.id);
            }
        }
        let mut stack = vec![g];
        while let Some(b) = stack.pop() {
            let r = rooted[&b].clone();
            for c in children.get(&b).into_iter().flatten() {
                let ts = msgs[c].timestamp.unwrap_or(0);
                rooted.insert(
                    *c,
                    Rooted {
                        height: r.height + 1,
                        max_ts: r.max_ts.max(ts),
                        parent: Some(b),
                    },
                );
                stack.push(*c);
            }
        }
        Self { msgs, rooted }
    }

    pub fn ts(&self, id: &MessageId) -> Slot {
        self.msgs.get(id).and_then(|m| m.timestamp).unwrap_or(0)
    }

    pub fn ancestor_at(&self, id: &MessageId, h: u32) -> MessageId {
        let mut cur = *id;
        while self.rooted[&cur].height > h {
            cur = self.rooted[&cur].parent.expect("rooted block has a parent");
        }
        cur
    }

    pub fn chain(&self, id: &MessageId) -> Vec<MessageId> {
        let mut out = vec![*id];
        let mut cur = *id;
        while let Some(p) = self.rooted[&cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Best rooted tip: highest, then smallest id.
    pub fn best_tip(&self) -> MessageId {
        let mut best = MessageId::genesis();
        let mut bh = 0;
        for (id, r) in &self.rooted {
            if r.height > bh || (r.height == bh && *id < best) {
                best = *id;
                bh = r.height;
            }
        }
        best
    }
}

/// All complete witnesses `(i, leaf)` in a set, with their extensions.
fn witnesses(ix: &SetIndex<'_>, params: &DensityParams) -> Vec<(u32, MessageId, Vec<MessageId>)> {
    let mut counts: HashMap<(u32, MessageId), HashMap<Slot, MessageId>> = HashMap::new();
    let mut ids: Vec<&MessageId> = ix.rooted.keys().collect();
    ids.sort();
    for id in ids {
        let r = &ix.rooted[id];
        let ts = ix.ts(id);
        let Some(i) = params.interval_of(ts) else { continue };
        if r.height <= i || ix.msgs.get(id).and_then(|m| m.timestamp).is_none() {
            continue;
        }
        let leaf = ix.ancestor_at(id, i);
        if ix.rooted[&leaf].max_ts >= params.start(i) {
            continue;
        }
        counts.entry((i, leaf)).or_default().entry(ts).or_insert(*id);
    }
    let mut out: Vec<(u32, MessageId, Vec<MessageId>)> = counts
        .into_iter()
        .filter(|(_, v)| v.len() >= params.threshold as usize)
        .map(|((i, l), v)| {
            let mut ext: Vec<(Slot, MessageId)> = v.into_iter().collect();
            ext.sort();
            (i, l, ext.into_iter().take(params.threshold as usize).map(|e| e.1).collect())
        })
        .collect();
    out.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    out
}

/// The density rule evaluated on an arbitrary message set: the chain of the
/// maximal witness, or the empty chain.
pub fn confirm_density(set: &[&Message], params: &DensityParams) -> Vec<MessageId> {
    density_witness(set, params).map(|w| w.chain).unwrap_or_default()
}

pub fn density_witness(set: &[&Message], params: &DensityParams) -> Option<DensityWitness> {
    let ix = SetIndex::new(set);
    let (i, leaf, extension) = witnesses(&ix, params).into_iter().next()?;
    Some(DensityWitness {
        interval: i,
        leaf,
        chain: ix.chain(&leaf),
        extension,
    })
}

/// Every complete witness leaf in a set, as `(interval, leaf)`.
pub fn witness_leaves(set: &[&Message], params: &DensityParams) -> Vec<(u32, MessageId)> {
    let ix = SetIndex::new(set);
    witnesses(&ix, params).into_iter().map(|w| (w.0, w.1)).collect()
}

impl DensityWitness {
    /// Re-checks the witness against `set` alone.
    pub fn verify(&self, set: &[&Message], params: &DensityParams) -> bool {
        let ix = SetIndex::new(set);
        let Some(r) = ix.rooted.get(&self.leaf) else {
            return false;
        };
        if r.height != self.interval
            || self.interval < 1
            || self.interval > params.intervals
            || r.max_ts >= params.start(self.interval)
            || ix.chain(&self.leaf) != self.chain
        {
            return false;
        }
        let mut seen = HashSet::new();
        for id in &self.extension {
            let Some(e) = ix.rooted.get(id) else { return false };
            let ts = ix.ts(id);
            if e.height <= self.interval
                || ix.ancestor_at(id, self.interval) != self.leaf
                || params.interval_of(ts) != Some(self.interval)
                || !seen.insert(ts)
            {
                return false;
            }
        }
        seen.len() >= params.threshold as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ProcessorId, PublicKey};

    fn params(r: u64, threshold: u32, ell: Slot, duration: Slot) -> DensityParams {
        let spacing = ell + r;
        DensityParams {
            theta: 1.5,
            epsilon_prime: 0.05,
            slot_rate: 0.5,
            duration,
            ell,
            r,
            threshold,
            intervals: (duration.saturating_sub(r) / spacing) as u32,
        }
    }

    #[test]
    fn threshold_midpoint_example() {
        let (h, a) = production_rates(1.5, 0.5);
        assert!((h * 400.0 - 120.0).abs() < 1e-9);
        assert!((a * 400.0 - 80.0).abs() < 1e-9);
        assert_eq!(density_threshold(1.5, 0.5, 400).unwrap(), 100);
        assert_eq!(density_threshold(f64::INFINITY, 0.5, 400).unwrap(), 100);
        assert!(density_threshold(1.0, 0.5, 400).is_err());
        assert!(interval_length_r(1.0, 0.05, 0.5, 1000).is_err());
        assert!(interval_length_r(1.5, 0.05, 0.0, 1000).is_err());
    }

    #[test]
    fn r_is_minimal_and_monotone() {
        for &(theta, eps, lam, d) in &[(1.5, 0.05, 0.8, 3000u64), (2.0, 0.01, 0.5, 10_000), (3.0, 0.2, 1.0, 100)] {
            let r = interval_length_r(theta, eps, lam, d).unwrap();
            let g = gap(theta, lam);
            assert!(budget_holds(r, g, eps, d));
            assert!(r == 1 || !budget_holds(r - 1, g, eps, d));
            assert!(r <= interval_length_upper(theta, eps, lam, d));
        }
        let mut prev = u64::MAX;
        for theta in [1.2, 1.5, 2.0, 3.0, 5.0, 10.0] {
            let r = interval_length_r(theta, 0.05, 0.5, 5000).unwrap();
            assert!(r <= prev, "r grew with Θ at {theta}");
            prev = r;
        }
    }

    #[test]
    fn halving_epsilon_adds_bounded_length() {
        for theta in [1.5, 2.0, 4.0] {
            let g = gap(theta, 0.6);
            let bound = (2.0 / (g * g) * 2f64.ln()).ceil() as u64 + 1;
            for eps in [0.2, 0.05, 0.01, 0.001] {
                let a = interval_length_r(theta, eps, 0.6, 5000).unwrap();
                let b = interval_length_r(theta, eps / 2.0, 0.6, 5000).unwrap();
                assert!(b >= a && b - a <= bound, "{a} -> {b} (bound {bound})");
            }
        }
    }

    #[test]
    fn sublinear_past_computed_bound() {
        for alpha in [0.5, 0.1, 0.02] {
            let n = sublinearity_bound(1.5, 0.05, 0.8, alpha);
            let mut d = n;
            while d < 4_000_000 {
                let r = interval_length_r(1.5, 0.05, 0.8, d).unwrap();
                assert!((r as f64) < alpha * d as f64, "α={alpha} D={d} r={r}");
                d = d + 1 + d / 7;
            }
        }
    }

    fn key() -> PublicKey {
        PublicKey::new(ProcessorId(0), 0)
    }

    fn blk(parent: &Message, ts: Slot) -> Message {
        Message::block(key(), parent.id, vec![], Some(ts))
    }

    #[test]
    fn grid_membership() {
        let p = params(10, 3, 5, 100);
        assert_eq!(p.spacing(), 15);
        assert_eq!(p.intervals, 6);
        assert_eq!(p.interval_of(14), None);
        assert_eq!(p.interval_of(15), Some(1));
        assert_eq!(p.interval_of(25), Some(1));
        assert_eq!(p.interval_of(26), None);
        assert_eq!(p.interval_of(90), Some(6));
        assert_eq!(p.interval_of(105), None);
        assert_eq!(p.interval_of(3), None);
    }

    #[test]
    fn empty_set_and_longer_witness_wins() {
        let p = params(10, 3, 5, 100);
        let g = Message::genesis();
        assert!(confirm_density(&[&g], &p).is_empty());
        // Chain with one block before t_1 = 15, then blocks at 15, 16, 17.
        let mut chain = vec![blk(&g, 3)];
        for ts in [15, 16, 17] {
            let next = blk(chain.last().unwrap(), ts);
            chain.push(next);
        }
        let set: Vec<&Message> = chain.iter().collect();
        assert_eq!(confirm_density(&set, &p), vec![g.id, chain[0].id]);
        // Extend to witness interval 2 (t_2 = 30) at height 2.
        for ts in [30, 31, 33] {
            let next = blk(chain.last().unwrap(), ts);
            chain.push(next);
        }
        let set: Vec<&Message> = chain.iter().collect();
        let w = density_witness(&set, &p).unwrap();
        assert_eq!(w.interval, 2);
        assert_eq!(w.chain, vec![g.id, chain[0].id, chain[1].id]);
        assert!(w.verify(&set, &p));
        // Drop one extension block: only the interval-1 witness remains.
        let partial: Vec<&Message> = chain[..6].iter().collect();
        assert_eq!(density_witness(&partial, &p).unwrap().interval, 1);
    }

    #[test]
    fn witness_needs_distinct_timestamps_and_old_chain() {
        let p = params(10, 3, 5, 100);
        let g = Message::genesis();
        let a = blk(&g, 3);
        // Three children at the same timestamp count once.
        let kids: Vec<Message> = (0..3)
            .map(|i| Message::block(PublicKey::new(ProcessorId(i), 0), a.id, vec![], Some(16)))
            .collect();
        let mut set: Vec<&Message> = vec![&a];
        set.extend(kids.iter());
        assert!(confirm_density(&set, &p).is_empty());
        // Leaf stamped inside the interval is too young.
        let young = blk(&g, 15);
        let c1 = blk(&young, 16);
        let c2 = blk(&c1, 17);
        let c3 = blk(&c2, 18);
        assert!(confirm_density(&[&young, &c1, &c2, &c3], &p).is_empty());
    }

    #[test]
    fn incremental_state_matches_set_evaluation() {
        let p = params(10, 3, 5, 100);
        let mut ledger = Ledger::new();
        let mut view = crate::ledger::View::new();
        let mut st = DensityState::new();
        let mut msgs = vec![];
        let g = Message::genesis();
        let a = blk(&g, 2);
        let b = blk(&a, 20);
        let c = blk(&b, 22);
        let d = blk(&a, 24);
        let ids: Vec<Idx> = [&a, &b, &c, &d]
            .into_iter()
            .map(|m| ledger.insert(m.clone()).unwrap())
            .collect();
        msgs.extend([a, b, c, d]);
        // Deliver c before its parent b.
        for i in [ids[0], ids[2], ids[1], ids[3]] {
            view.insert(&ledger, i);
            for r in view.take_newly_rooted() {
                st.observe(&p, &ledger, r);
            }
        }
        let set: Vec<&Message> = msgs.iter().collect();
        let expect = confirm_density(&set, &p);
        let got = st.confirmed().map(|l| {
            ledger.chain(l).into_iter().map(|i| ledger.id(i)).collect::<Vec<_>>()
        });
        assert_eq!(got.unwrap_or_default(), expect);
        assert_eq!(expect.len(), 2);
    }
}
