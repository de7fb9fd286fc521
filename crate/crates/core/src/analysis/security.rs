//! Security, timeslot security and uniform security over confirmed chains.
//!
//! Confirmed chains are prefix closed, so all blocks confirmed for `p₁` at
//! `t₁` are compatible with all those confirmed for `p₂` at `t₂` exactly when
//! one tip extends the other. Only honest processors are examined.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::replay::Replay;
use super::stats::Estimate;
use crate::error::Result;
use crate::ledger::Idx;
use crate::transcript::Transcript;
use crate::types::{MessageId, ProcessorId, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Security,
    UniformSecurity,
    TimeslotSecurity,
    Certificate,
}

/// Where an incompatible pair was confirmed: by processors at slots, or by
/// broadcast message sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Witnesses {
    Confirmed {
        p1: ProcessorId,
        t1: Slot,
        p2: ProcessorId,
        t2: Slot,
    },
    Certificates {
        m1: Vec<MessageId>,
        m2: Vec<MessageId>,
        t: Slot,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub kind: ViolationKind,
    pub blocks: (MessageId, MessageId),
    pub witnesses: Witnesses,
}

/// Honest confirmed tips of a transcript, with where each first appeared.
pub struct SecurityView {
    replay: Replay,
    /// Distinct tips with the first `(p, t)` to confirm each, ordered by height.
    tips: Vec<(Idx, ProcessorId, Slot)>,
}

impl SecurityView {
    pub fn new(tr: &Transcript) -> Result<Self> {
        let replay = Replay::new(tr)?;
        let mut seen = HashSet::new();
        let mut tips = Vec::new();
        let mut recs: Vec<(Slot, ProcessorId, Idx)> = Vec::new();
        for &p in &replay.honest {
            for c in replay.confirmations(p) {
                if let Some(t) = c.tip {
                    recs.push((c.slot, p, t));
                }
            }
        }
        recs.sort();
        for (t, p, tip) in recs {
            if seen.insert(tip) {
                tips.push((tip, p, t));
            }
        }
        tips.sort_by_key(|&(tip, p, t)| (replay.ledger.height(tip), t, p, tip));
        Ok(Self { replay, tips })
    }

    pub fn replay(&self) -> &Replay {
        &self.replay
    }

    fn tip(&self, p: ProcessorId, t: Slot) -> Option<Idx> {
        self.replay.confirmed_at(p, t).and_then(|c| c.tip)
    }

    /// Security for one `(p₁, t₁, p₂, t₂)`: true if incompatible.
    pub fn security_violated(&self, p1: ProcessorId, t1: Slot, p2: ProcessorId, t2: Slot) -> bool {
        !self.replay.compatible(self.tip(p1, t1), self.tip(p2, t2))
    }

    /// Timeslot security for one `(t₁, t₂)`: some honest chain confirmed at
    /// `t₁` is incompatible with some honest chain confirmed at `t₂`.
    pub fn timeslot_violated(&self, t1: Slot, t2: Slot) -> bool {
        let a: Vec<Option<Idx>> = self.replay.honest.iter().map(|&p| self.tip(p, t1)).collect();
        let b: Vec<Option<Idx>> = self.replay.honest.iter().map(|&p| self.tip(p, t2)).collect();
        a.iter().any(|&x| b.iter().any(|&y| !self.replay.compatible(x, y)))
    }

    /// Consecutive incompatible tips in height order. Empty exactly when all
    /// honest confirmed chains of the execution lie on one chain.
    pub fn uniform_violations(&self) -> Vec<ViolationRecord> {
        let l = &self.replay.ledger;
        self.tips
            .windows(2)
            .filter(|w| !l.is_ancestor_or_eq(w[0].0, w[1].0))
            .map(|w| ViolationRecord {
                kind: ViolationKind::UniformSecurity,
                blocks: (l.id(w[0].0), l.id(w[1].0)),
                witnesses: Witnesses::Confirmed {
                    p1: w[0].1,
                    t1: w[0].2,
                    p2: w[1].1,
                    t2: w[1].2,
                },
            })
            .collect()
    }

    pub fn uniform_violated(&self) -> bool {
        let l = &self.replay.ledger;
        self.tips.windows(2).any(|w| !l.is_ancestor_or_eq(w[0].0, w[1].0))
    }

    /// First slot at which the confirmed chains seen so far stop lying on one
    /// chain.
    pub fn first_violation_slot(&self) -> Option<Slot> {
        let l = &self.replay.ledger;
        let mut by_slot: Vec<(Idx, ProcessorId, Slot)> = self.tips.clone();
        by_slot.sort_by_key(|x| (x.2, x.1));
        let mut longest: Option<Idx> = None;
        for (tip, _, t) in by_slot {
            match longest {
                None => longest = Some(tip),
                Some(c) if l.is_ancestor_or_eq(c, tip) => longest = Some(tip),
                Some(c) if l.is_ancestor_or_eq(tip, c) => {}
                Some(_) => return Some(t),
            }
        }
        None
    }
}

/// Security violations of a transcript: the uniform records, plus one
/// security and one timeslot record for the first incompatible pair found
/// among the per-slot confirmed chains.
pub fn check_security(tr: &Transcript) -> Result<Vec<ViolationRecord>> {
    let v = SecurityView::new(tr)?;
    let mut out = v.uniform_violations();
    if let Some(first) = out.first().cloned() {
        if let Witnesses::Confirmed { p1, t1, p2, t2 } = first.witnesses {
            out.push(ViolationRecord {
                kind: ViolationKind::Security,
                ..first.clone()
            });
            if v.timeslot_violated(t1, t2) {
                out.push(ViolationRecord {
                    kind: ViolationKind::TimeslotSecurity,
                    witnesses: Witnesses::Confirmed { p1, t1, p2, t2 },
                    ..first
                });
            }
        }
    }
    Ok(out)
}

/// Security estimates over trials sharing a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityEstimates {
    /// Fraction of trials with any incompatible pair of honest confirmations.
    pub uniform_violation: Estimate,
    /// Per queried `(p₁, t₁, p₂, t₂)`, fraction of trials violating it.
    pub pairs: Vec<((ProcessorId, Slot, ProcessorId, Slot), Estimate)>,
    /// Per queried `(t₁, t₂)`, fraction of trials violating it.
    pub slots: Vec<((Slot, Slot), Estimate)>,
}

pub fn estimate_security(
    views: &[SecurityView],
    pairs: &[(ProcessorId, Slot, ProcessorId, Slot)],
    slots: &[(Slot, Slot)],
) -> SecurityEstimates {
    SecurityEstimates {
        uniform_violation: Estimate::from_flags(views.iter().map(|v| v.uniform_violated())),
        pairs: pairs
            .iter()
            .map(|&(p1, t1, p2, t2)| {
                let e = Estimate::from_flags(views.iter().map(|v| v.security_violated(p1, t1, p2, t2)));
                ((p1, t1, p2, t2), e)
            })
            .collect(),
        slots: slots
            .iter()
            .map(|&(t1, t2)| {
                ((t1, t2), Estimate::from_flags(views.iter().map(|v| v.timeslot_violated(t1, t2))))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::pow;
    use crate::engine::run_execution;
    use crate::transcript::{BroadcastRecord, ConfirmationRecord, Header, FORMAT_VERSION};
    use crate::types::{Message, PublicKey};

    #[test]
    fn honest_single_chain_has_no_violations() {
        let tr = run_execution(&pow(300, &[1.0, 1.0, 1.0], 0.05, 6)).unwrap();
        assert_eq!(check_security(&tr).unwrap(), vec![]);
    }

    fn confirmation(slot: Slot, p: u32, tip: &Message, length: u32) -> ConfirmationRecord {
        ConfirmationRecord {
            slot,
            processor: ProcessorId(p),
            length,
            tip: Some(tip.id),
            state_size: 1,
        }
    }

    #[test]
    fn hand_built_fork_is_one_violation_of_each_kind() {
        let cfg = pow(10, &[1.0, 1.0], 0.1, 1);
        let g = Message::genesis();
        let key = |p| PublicKey::new(ProcessorId(p), 0);
        let a = Message::block(key(0), g.id, vec![1], None);
        let b = Message::block(key(1), g.id, vec![2], None);
        let mut tr = Transcript::new(Header {
            format_version: FORMAT_VERSION,
            seed: 1,
            processors: cfg.processors(),
            config: cfg,
        });
        for (p, m) in [(0, &a), (1, &b)] {
            tr.broadcasts.push(BroadcastRecord { slot: 1, sender: ProcessorId(p), message: m.clone() });
        }
        tr.confirmations = vec![
            confirmation(1, 0, &g, 0),
            confirmation(1, 1, &g, 0),
            confirmation(3, 0, &a, 1),
            confirmation(3, 1, &b, 1),
        ];
        tr.slots_run = 5;
        let recs = check_security(&tr).unwrap();
        let kinds: Vec<ViolationKind> = recs.iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![ViolationKind::UniformSecurity, ViolationKind::Security, ViolationKind::TimeslotSecurity]
        );
        let v = SecurityView::new(&tr).unwrap();
        assert!(v.security_violated(ProcessorId(0), 3, ProcessorId(1), 3));
        assert!(!v.security_violated(ProcessorId(0), 2, ProcessorId(1), 3));
        assert!(v.timeslot_violated(3, 4));
        assert!(!v.timeslot_violated(1, 3));
        assert_eq!(v.first_violation_slot(), Some(3));
    }
}
