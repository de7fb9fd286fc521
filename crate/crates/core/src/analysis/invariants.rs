//! Framework invariants re-checked from a transcript.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::replay::Replay;
use crate::blocktree::BlockTree;
use crate::error::Fault;
use crate::ledger::{Idx, GENESIS};
use crate::network::{check_delta_conformance, DeltaViolation};
use crate::permitter::{PermitRecord, PermitterSpec};
use crate::protocols::{AttachmentMap, ProtocolSpec, Rule};
use crate::transcript::Transcript;
use crate::types::{MessageId, ProcessorId, PublicKey, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvariantViolation {
    /// The run aborted.
    Fault { fault: Fault },
    /// The transcript cannot be replayed at all.
    Replay { reason: String },
    /// A confirmed chain is not a chain inside the processor's state.
    ChainSubset { processor: ProcessorId, slot: Slot, reason: String },
    /// The rule re-evaluated on the final state disagrees with the record.
    RuleMismatch { processor: ProcessorId },
    /// A recorded state size disagrees with the replay, or shrank.
    StateSize { processor: ProcessorId, slot: Slot, recorded: usize, replayed: usize },
    /// A delivery repeats, precedes its broadcast, or has no broadcast.
    Delivery { receiver: ProcessorId, message: MessageId, slot: Slot, reason: String },
    /// A message missed its synchronous delivery deadline.
    Delta { violation: DeltaViolation },
    /// A broadcast without a matching permission or with a missing parent or
    /// embedded message.
    Permission { message: MessageId, slot: Slot, reason: String },
    /// Blocks do not form one tree rooted at genesis.
    BlockTree { reason: String },
}

/// Every framework invariant checked against one transcript. An empty result
/// means the transcript is clean.
pub fn check_invariants(tr: &Transcript) -> Vec<InvariantViolation> {
    let mut out = Vec::new();
    if let Some(f) = &tr.fault {
        out.push(InvariantViolation::Fault { fault: f.clone() });
    }
    for b in &tr.broadcasts {
        if !b.message.verify_id() {
            out.push(InvariantViolation::BlockTree {
                reason: format!("message {} does not hash to its id", b.message.id),
            });
        }
    }
    if let Err(e) = BlockTree::from_messages(tr.broadcasts.iter().map(|b| &b.message)).check_rooted_tree() {
        out.push(InvariantViolation::BlockTree { reason: e.to_string() });
    }
    let replay = match Replay::new(tr) {
        Ok(r) => r,
        Err(e) => {
            out.push(InvariantViolation::Replay { reason: e.to_string() });
            return out;
        }
    };
    check_chain_subset(tr, &replay, &mut out);
    check_final_rule(tr, &replay, &mut out);
    check_state_sizes(tr, &replay, &mut out);
    check_deliveries(tr, &mut out);
    match check_delta_conformance(tr) {
        Ok(v) => out.extend(v.into_iter().map(|violation| InvariantViolation::Delta { violation })),
        Err(e) => out.push(InvariantViolation::Replay { reason: e.to_string() }),
    }
    check_permissions(tr, &replay, &mut out);
    out
}

fn check_chain_subset(tr: &Transcript, r: &Replay, out: &mut Vec<InvariantViolation>) {
    for c in &tr.confirmations {
        let bad = |reason: String| InvariantViolation::ChainSubset {
            processor: c.processor,
            slot: c.slot,
            reason,
        };
        let Some(id) = c.tip else {
            if c.length != 0 {
                out.push(bad(format!("empty chain with length {}", c.length)));
            }
            continue;
        };
        let tip = r.ledger.get(&id).expect("replay resolved every tip");
        if r.ledger.height(tip) != c.length {
            out.push(bad(format!(
                "length {} but tip height {}",
                c.length,
                r.ledger.height(tip)
            )));
        }
        if let Some(missing) = r
            .ledger
            .chain(tip)
            .into_iter()
            .find(|&b| r.known_at(c.processor, b).is_none_or(|k| k > c.slot))
        {
            out.push(bad(format!("block {} not in the state", r.ledger.id(missing))));
        }
    }
}

fn rule_of(tr: &Transcript) -> Option<Rule> {
    let cfg = tr.config();
    let slot_rate = match cfg.permitter {
        PermitterSpec::Pos { slot_rate } => Some(slot_rate),
        PermitterSpec::Pow { .. } => None,
    };
    Rule::resolve(&cfg.confirmation, cfg.epsilon, cfg.duration, slot_rate).ok()
}

fn check_final_rule(tr: &Transcript, r: &Replay, out: &mut Vec<InvariantViolation>) {
    let Some(rule) = rule_of(tr) else { return };
    if tr.slots_run == 0 {
        return;
    }
    for &p in &r.processors {
        let state = r.state(p, tr.slots_run);
        let expect = rule.confirm_set(&state).last().copied();
        let recorded = r
            .confirmed_at(p, tr.slots_run)
            .and_then(|c| c.tip)
            .map(|i| r.ledger.id(i));
        if expect != recorded {
            out.push(InvariantViolation::RuleMismatch { processor: p });
        }
    }
}

fn check_state_sizes(tr: &Transcript, r: &Replay, out: &mut Vec<InvariantViolation>) {
    let mut last: HashMap<ProcessorId, usize> = HashMap::new();
    for c in &tr.confirmations {
        let replayed = r.state_size(c.processor, c.slot);
        let prev = last.insert(c.processor, c.state_size).unwrap_or(0);
        if replayed != c.state_size || c.state_size < prev {
            out.push(InvariantViolation::StateSize {
                processor: c.processor,
                slot: c.slot,
                recorded: c.state_size,
                replayed,
            });
        }
    }
}

fn check_deliveries(tr: &Transcript, out: &mut Vec<InvariantViolation>) {
    let sent: HashSet<(MessageId, ProcessorId, Slot)> = tr
        .broadcasts
        .iter()
        .map(|b| (b.message.id, b.sender, b.slot))
        .collect();
    let mut seen = HashSet::new();
    for d in &tr.deliveries {
        let bad = |reason: &str| InvariantViolation::Delivery {
            receiver: d.receiver,
            message: d.message,
            slot: d.slot,
            reason: reason.into(),
        };
        if !seen.insert((d.receiver, d.message, d.sender, d.sent_slot)) {
            out.push(bad("delivered twice"));
        }
        if !sent.contains(&(d.message, d.sender, d.sent_slot)) {
            out.push(bad("no matching broadcast"));
        }
        if d.slot <= d.sent_slot || d.receiver == d.sender {
            out.push(bad("delivered no later than sent, or to its sender"));
        }
    }
}

fn check_permissions(tr: &Transcript, r: &Replay, out: &mut Vec<InvariantViolation>) {
    let mut exact: HashMap<MessageId, Slot> = HashMap::new();
    let mut stamped: HashMap<(PublicKey, Slot), Slot> = HashMap::new();
    for g in &tr.grants {
        match g.permit {
            PermitRecord::Exact { message } => {
                exact.entry(message).or_insert(g.slot);
            }
            PermitRecord::Timestamped { slot } => {
                stamped.entry((g.key, slot)).or_insert(g.slot);
            }
        }
    }
    // Own broadcasts count as held from their position in the slot on.
    let mut held: HashSet<(ProcessorId, Idx)> = HashSet::new();
    let held_before = |held: &HashSet<(ProcessorId, Idx)>, p: ProcessorId, i: Idx, t: Slot| {
        i == GENESIS || held.contains(&(p, i)) || r.known_at(p, i).is_some_and(|k| k < t)
    };
    let mut delivered_now: HashSet<(ProcessorId, MessageId, Slot)> = HashSet::new();
    for d in &tr.deliveries {
        delivered_now.insert((d.receiver, d.message, d.slot));
    }
    for b in &tr.broadcasts {
        let m = &b.message;
        let bad = |reason: String| InvariantViolation::Permission {
            message: m.id,
            slot: b.slot,
            reason,
        };
        let has = |i: Idx| {
            held_before(&held, b.sender, i, b.slot)
                || delivered_now.contains(&(b.sender, r.ledger.id(i), b.slot))
        };
        if m.signer.owner != b.sender {
            out.push(bad(format!("signed by {} but sent by {}", m.signer.owner, b.sender)));
        }
        let permitted = match m.timestamp {
            None => exact.get(&m.id).is_some_and(|&s| s <= b.slot),
            Some(ts) => {
                stamped.get(&(m.signer, ts)).is_some_and(|&s| s <= b.slot)
                    && m.parent().and_then(|p| r.ledger.get(&p)).is_some_and(|p| {
                        r.ledger.msg(p).timestamp.unwrap_or(0) < ts
                    })
            }
        };
        if !permitted {
            out.push(bad("no matching permission".into()));
        }
        if let Some(p) = m.parent().and_then(|p| r.ledger.get(&p)) {
            if !has(p) {
                out.push(bad("parent not in the sender's state".into()));
            }
        }
        for e in &m.embedded {
            if !r.ledger.get(e).is_some_and(has) {
                out.push(bad(format!("embedded {e} not held")));
            }
        }
        let idx = r.ledger.get(&m.id).expect("replayed");
        held.insert((b.sender, idx));
    }
}

/// Honest broadcasts of the slot-leader protocol that do not extend the
/// broadcaster's confirmed chain from the previous slot. Deep reorganisations
/// can produce these, so callers compare counts against expectations rather
/// than demanding zero.
pub fn standard_form_exceptions(tr: &Transcript) -> Option<Vec<(ProcessorId, Slot)>> {
    if !matches!(tr.config().protocol, ProtocolSpec::PosLongestChain { .. }) {
        return None;
    }
    let r = Replay::new(tr).ok()?;
    let honest: HashSet<ProcessorId> = r.honest.iter().copied().collect();
    let mut att = AttachmentMap::new();
    let mut out = Vec::new();
    for b in &tr.broadcasts {
        att.add(&b.message, |id| r.ledger.get(id).is_some_and(|i| r.ledger.is_block(i)));
        if !honest.contains(&b.sender) {
            continue;
        }
        let Some(block) = att.get(&b.message.id).and_then(|id| r.ledger.get(&id)) else {
            out.push((b.sender, b.slot));
            continue;
        };
        let confirmed = r.confirmed_at(b.sender, b.slot - 1).and_then(|c| c.tip);
        if confirmed.is_some_and(|c| !r.ledger.is_ancestor_or_eq(c, block)) {
            out.push((b.sender, b.slot));
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::{pos, pow};
    use crate::engine::run_execution;
    use crate::transcript::DeliveryRecord;

    #[test]
    fn honest_runs_are_clean() {
        for cfg in [pow(200, &[1.0, 2.0, 1.0], 0.2, 3), pos(200, &[1.0, 1.0], 0.3, 3)] {
            let tr = run_execution(&cfg).unwrap();
            assert_eq!(check_invariants(&tr), vec![]);
        }
    }

    #[test]
    fn tampering_is_caught() {
        let tr = run_execution(&pow(100, &[1.0, 1.0], 0.2, 2)).unwrap();
        assert!(!tr.deliveries.is_empty());

        let mut dup = tr.clone();
        dup.deliveries.push(dup.deliveries[0].clone());
        assert!(check_invariants(&dup)
            .iter()
            .any(|v| matches!(v, InvariantViolation::Delivery { .. })));

        let mut forged = tr.clone();
        forged.grants.clear();
        assert!(check_invariants(&forged)
            .iter()
            .any(|v| matches!(v, InvariantViolation::Permission { .. })));

        let mut shrunk = tr.clone();
        let last = shrunk.confirmations.len() - 1;
        shrunk.confirmations[last].state_size = 1;
        assert!(check_invariants(&shrunk)
            .iter()
            .any(|v| matches!(v, InvariantViolation::StateSize { .. })));

        let mut late = tr.clone();
        let d = &late.deliveries[0];
        late.deliveries[0] = DeliveryRecord { slot: d.sent_slot + 10, ..d.clone() };
        assert!(check_invariants(&late)
            .iter()
            .any(|v| matches!(v, InvariantViolation::Delta { .. } | InvariantViolation::StateSize { .. })));
    }

    #[test]
    fn honest_pos_mostly_stays_in_standard_form() {
        let tr = run_execution(&pos(300, &[1.0, 1.0, 1.0], 0.1, 3)).unwrap();
        let ex = standard_form_exceptions(&tr).unwrap();
        assert!(ex.len() * 20 <= tr.broadcasts.len(), "{} of {}", ex.len(), tr.broadcasts.len());
    }
}
