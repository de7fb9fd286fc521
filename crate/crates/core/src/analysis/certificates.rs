//! Incompatible blocks that both have subjective certificates among the
//! messages broadcast by a slot.
//!
//! A block `B` has a certificate in a set `L` when `B ∈ C(M)` for some
//! `M ⊆ L`. Both reference rules admit an exact characterisation:
//!
//! * `k`-deep: `B` is certifiable iff `L` holds a rooted descendant of `B` at
//!   least `k` blocks deeper (take `M` to be that descendant's chain).
//! * density: `B` is certifiable iff it lies on the chain of some witness
//!   leaf of `L` (take `M` to be the leaf's chain plus the paths to its
//!   extension; no other block of `M` sits at the leaf's height, so the
//!   maximal witness of `M` descends from the leaf).
//!
//! Certifiable blocks are closed under ancestors, so a violation exists iff
//! two certifiable blocks are siblings (`k`-deep) or two witness leaves are
//! incompatible (density). [`exhaustive_violation`] enumerates every subset
//! and serves as the oracle for both.

use std::collections::{HashMap, HashSet};

use super::security::{ViolationKind, ViolationRecord, Witnesses};
use crate::blocktree::BlockTree;
use crate::error::{Error, Result};
use crate::protocols::density::SetIndex;
use crate::protocols::density::witness_leaves;
use crate::protocols::{density_witness, Rule};
use crate::transcript::Transcript;
use crate::types::{Message, MessageId, Slot};

/// Largest ledger the exhaustive search accepts.
pub const EXHAUSTIVE_LIMIT: usize = 15;

/// Messages broadcast at or before `t`, in broadcast order, first copy only.
pub fn ledger_by(tr: &Transcript, t: Slot) -> Vec<&Message> {
    let mut seen = HashSet::new();
    tr.broadcasts
        .iter()
        .filter(|b| b.slot <= t && seen.insert(b.message.id))
        .map(|b| &b.message)
        .collect()
}

/// A certificate violation among the messages broadcast by `t`, found by the
/// rule's structured searcher.
pub fn check_certificates(tr: &Transcript, rule: &Rule, t: Slot) -> Option<ViolationRecord> {
    certificate_violation(&ledger_by(tr, t), rule, t)
}

pub fn certificate_violation(set: &[&Message], rule: &Rule, t: Slot) -> Option<ViolationRecord> {
    let (b1, m1, b2, m2) = match rule {
        Rule::KDeep(k) => k_deep_search(set, *k)?,
        Rule::Density(p) => {
            let leaves = witness_leaves(set, p);
            let ix = SetIndex::new(set);
            let (l1, l2) = first_incompatible(&ix, leaves.iter().map(|w| w.1))?;
            let cert = |leaf: MessageId| {
                let w = density_witness_for(set, p, leaf);
                let mut m = w.0;
                m.extend(w.1);
                m.sort();
                m.dedup();
                m
            };
            (l1, cert(l1), l2, cert(l2))
        }
    };
    Some(ViolationRecord {
        kind: ViolationKind::Certificate,
        blocks: (b1, b2),
        witnesses: Witnesses::Certificates { m1, m2, t },
    })
}

type Found = (MessageId, Vec<MessageId>, MessageId, Vec<MessageId>);

fn k_deep_search(set: &[&Message], k: u32) -> Option<Found> {
    let ix = SetIndex::new(set);
    // Deepest rooted descendant height below each block.
    let mut ids: Vec<&MessageId> = ix.rooted.keys().collect();
    ids.sort_by_key(|id| std::cmp::Reverse(ix.rooted[*id].height));
    let mut deepest: HashMap<MessageId, (u32, MessageId)> = HashMap::new();
    for id in ids {
        let h = ix.rooted[id].height;
        let here = *deepest.entry(*id).or_insert((h, *id));
        if let Some(p) = ix.rooted[id].parent {
            let e = deepest.entry(p).or_insert(here);
            if here.0 > e.0 || (here.0 == e.0 && here.1 < e.1) {
                *e = here;
            }
        }
    }
    let certifiable = |id: &MessageId| deepest[id].0 >= ix.rooted[id].height + k;
    let mut children: HashMap<MessageId, Vec<MessageId>> = HashMap::new();
    for (id, r) in &ix.rooted {
        if let Some(p) = r.parent {
            if certifiable(id) {
                children.entry(p).or_default().push(*id);
            }
        }
    }
    let mut forks: Vec<(MessageId, Vec<MessageId>)> =
        children.into_iter().filter(|(_, c)| c.len() >= 2).collect();
    forks.sort();
    let (_, mut kids) = forks.into_iter().next()?;
    kids.sort();
    let cert = |b: &MessageId| ix.chain(&deepest[b].1);
    Some((kids[0], cert(&kids[0]), kids[1], cert(&kids[1])))
}

/// The chain of `leaf` and its extension, as a certificate for blocks on it.
fn density_witness_for(
    set: &[&Message],
    p: &crate::protocols::DensityParams,
    leaf: MessageId,
) -> (Vec<MessageId>, Vec<MessageId>) {
    let ix = SetIndex::new(set);
    let chain = ix.chain(&leaf);
    let i = ix.rooted[&leaf].height;
    // Every rooted descendant of the leaf whose timestamp falls in interval
    // `i`, with the paths leading to it.
    let mut m: Vec<MessageId> = Vec::new();
    for (id, r) in &ix.rooted {
        if r.height > i
            && ix.ancestor_at(id, i) == leaf
            && p.interval_of(ix.ts(id)) == Some(i)
            && ix.msgs.get(id).is_some_and(|m| m.timestamp.is_some())
        {
            let mut cur = *id;
            while cur != leaf {
                m.push(cur);
                cur = ix.rooted[&cur].parent.expect("below the leaf");
            }
        }
    }
    debug_assert!({
        let msgs: Vec<&Message> = chain
            .iter()
            .chain(m.iter())
            .filter_map(|id| ix.msgs.get(id).copied())
            .collect();
        density_witness(&msgs, p).is_some()
    });
    (chain, m)
}

fn first_incompatible(
    ix: &SetIndex<'_>,
    leaves: impl Iterator<Item = MessageId>,
) -> Option<(MessageId, MessageId)> {
    let mut ls: Vec<MessageId> = leaves.collect();
    ls.sort_by_key(|id| (ix.rooted[id].height, *id));
    ls.dedup();
    let anc = |a: &MessageId, b: &MessageId| ix.ancestor_at(b, ix.rooted[a].height) == *a;
    for w in ls.windows(2) {
        if !anc(&w[0], &w[1]) {
            return Some((w[0], w[1]));
        }
    }
    None
}

/// Verdict by enumerating every subset of `set`.
pub fn exhaustive_violation(set: &[&Message], rule: &Rule) -> Result<bool> {
    if set.len() > EXHAUSTIVE_LIMIT {
        return Err(Error::Unsupported(format!(
            "exhaustive certificate search over {} messages (limit {EXHAUSTIVE_LIMIT})",
            set.len()
        )));
    }
    let mut certified: HashSet<MessageId> = HashSet::new();
    let mut sub: Vec<&Message> = Vec::with_capacity(set.len());
    for mask in 0u32..(1 << set.len()) {
        sub.clear();
        sub.extend((0..set.len()).filter(|i| mask >> i & 1 == 1).map(|i| set[i]));
        certified.extend(rule.confirm_set(&sub));
    }
    let tree = BlockTree::from_messages(set.iter().copied());
    let c: Vec<MessageId> = certified.into_iter().collect();
    for (i, a) in c.iter().enumerate() {
        for b in &c[i + 1..] {
            if !tree.compatible(a, b)? {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// First slot by which a certificate violation exists, if any. Certifiability
/// only grows with the set, so this is a binary search over slots.
pub fn first_certificate_violation(tr: &Transcript, rule: &Rule) -> Option<Slot> {
    let end = tr.slots_run;
    check_certificates(tr, rule, end)?;
    let (mut lo, mut hi) = (1, end);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if check_certificates(tr, rule, mid).is_some() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{DensityParams, DensitySpec};
    use crate::types::{ProcessorId, PublicKey};
    use proptest::prelude::*;

    fn key(p: u32) -> PublicKey {
        PublicKey::new(ProcessorId(p), 0)
    }

    fn chain_of(n: u32, tag: u8) -> Vec<Message> {
        let mut out: Vec<Message> = Vec::new();
        let mut parent = MessageId::genesis();
        for i in 0..n {
            let m = Message::block(key(0), parent, vec![tag, i as u8], None);
            parent = m.id;
            out.push(m);
        }
        out
    }

    #[test]
    fn single_chain_never_violates() {
        let c = chain_of(12, 0);
        let set: Vec<&Message> = c.iter().collect();
        for k in 0..4 {
            assert!(certificate_violation(&set, &Rule::KDeep(k), 1).is_none());
            assert!(!exhaustive_violation(&set, &Rule::KDeep(k)).unwrap());
        }
    }

    #[test]
    fn two_deep_arms_violate() {
        let a = chain_of(5, 1);
        let b = chain_of(4, 2);
        let set: Vec<&Message> = a.iter().chain(b.iter()).collect();
        let rec = certificate_violation(&set, &Rule::KDeep(3), 7).unwrap();
        let tree = BlockTree::from_messages(set.iter().copied());
        assert!(!tree.compatible(&rec.blocks.0, &rec.blocks.1).unwrap());
        assert!(certificate_violation(&set, &Rule::KDeep(4), 7).is_none());
        assert!(exhaustive_violation(&set, &Rule::KDeep(3)).unwrap());
        assert!(!exhaustive_violation(&set, &Rule::KDeep(4)).unwrap());
    }

    #[test]
    fn oracle_refuses_large_ledgers() {
        let c = chain_of(16, 0);
        let set: Vec<&Message> = c.iter().collect();
        assert!(matches!(exhaustive_violation(&set, &Rule::KDeep(1)), Err(Error::Unsupported(_))));
    }

    fn density_rule() -> Rule {
        // r = 3, spacing 5: intervals [5, 8], [10, 13]; threshold 2.
        Rule::Density(DensityParams {
            theta: 1.5,
            epsilon_prime: 0.1,
            slot_rate: 0.5,
            duration: 16,
            ell: 2,
            r: 3,
            threshold: 2,
            intervals: 2,
        })
    }

    /// Random timestamped trees: each message picks a parent among earlier
    /// ones (or genesis) and a timestamp.
    fn random_set(spec: &[(usize, u64)]) -> Vec<Message> {
        let mut msgs: Vec<Message> = Vec::new();
        for (i, &(pick, ts)) in spec.iter().enumerate() {
            let parent = if pick % (i + 1) == i { MessageId::genesis() } else { msgs[pick % (i + 1)].id };
            msgs.push(Message::block(key((i % 3) as u32), parent, vec![i as u8], Some(ts)));
        }
        msgs
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn structured_matches_exhaustive(
            spec in prop::collection::vec((0usize..100, 1u64..16), 1..11),
            k in 0u32..4,
        ) {
            let msgs = random_set(&spec);
            let set: Vec<&Message> = msgs.iter().collect();
            for rule in [Rule::KDeep(k), density_rule()] {
                let fast = certificate_violation(&set, &rule, 1);
                prop_assert_eq!(fast.is_some(), exhaustive_violation(&set, &rule).unwrap());
                if let Some(rec) = fast {
                    let tree = BlockTree::from_messages(set.iter().copied());
                    prop_assert!(!tree.compatible(&rec.blocks.0, &rec.blocks.1).unwrap());
                    if let Witnesses::Certificates { m1, m2, .. } = &rec.witnesses {
                        let pick = |ids: &Vec<MessageId>| -> Vec<&Message> {
                            set.iter().copied().filter(|m| ids.contains(&m.id)).collect()
                        };
                        prop_assert!(rule.confirm_set(&pick(m1)).contains(&rec.blocks.0));
                        prop_assert!(rule.confirm_set(&pick(m2)).contains(&rec.blocks.1));
                    }
                }
            }
        }
    }

    #[test]
    fn density_spec_round_trip() {
        let spec = DensitySpec { theta: 1.5, epsilon_prime: 0.05, ell: 40 };
        let p = DensityParams::new(&spec, 0.5, 5000).unwrap();
        assert!(p.intervals >= 1);
    }
}
