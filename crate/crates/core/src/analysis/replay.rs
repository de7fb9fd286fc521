//! Reconstruction of the broadcast ledger and per-processor message states
//! from a transcript alone.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ledger::{Idx, Ledger, GENESIS};
use crate::transcript::Transcript;
use crate::types::{Message, MessageId, ProcessorId, Slot};

const UNKNOWN: Slot = Slot::MAX;

/// Confirmed chain of one processor from some slot on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confirmed {
    pub slot: Slot,
    pub length: u32,
    pub tip: Option<Idx>,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub ledger: Ledger,
    /// Processor ids in roster order.
    pub processors: Vec<ProcessorId>,
    pub honest: Vec<ProcessorId>,
    pub slots_run: Slot,
    /// `known_at[p][idx]`: first slot at which `p` held the message.
    known_at: Vec<Vec<Slot>>,
    /// Per processor, its confirmation records in slot order.
    confirmations: Vec<Vec<Confirmed>>,
    pos: HashMap<ProcessorId, usize>,
}

impl Replay {
    /// Fails when a broadcast block's parent was never broadcast, or a record
    /// names an unknown processor or message.
    pub fn new(tr: &Transcript) -> Result<Self> {
        let mut ledger = Ledger::new();
        for b in &tr.broadcasts {
            let idx = ledger
                .insert(b.message.clone())
                .ok_or(Error::Dangling(b.message.id))?;
            ledger.mark_broadcast(idx, b.slot, b.sender);
        }
        let processors: Vec<ProcessorId> = tr.header.processors.iter().map(|p| p.id).collect();
        let pos: HashMap<ProcessorId, usize> =
            processors.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let slot_of = |p: ProcessorId| {
            pos.get(&p)
                .copied()
                .ok_or_else(|| Error::Transcript(format!("unknown processor {p}")))
        };
        let mut known_at = vec![vec![UNKNOWN; ledger.len()]; processors.len()];
        for k in known_at.iter_mut() {
            k[GENESIS as usize] = 0;
        }
        let idx_of = |id: &MessageId| ledger.get(id).ok_or(Error::UnknownMessage(*id));
        for d in &tr.deliveries {
            let (p, i) = (slot_of(d.receiver)?, idx_of(&d.message)?);
            let k = &mut known_at[p][i as usize];
            *k = (*k).min(d.slot);
        }
        for b in &tr.broadcasts {
            let (p, i) = (slot_of(b.sender)?, idx_of(&b.message.id)?);
            let k = &mut known_at[p][i as usize];
            *k = (*k).min(b.slot);
        }
        let mut confirmations = vec![Vec::new(); processors.len()];
        for c in &tr.confirmations {
            let tip = c.tip.as_ref().map(idx_of).transpose()?;
            confirmations[slot_of(c.processor)?].push(Confirmed {
                slot: c.slot,
                length: c.length,
                tip,
            });
        }
        Ok(Self {
            ledger,
            honest: tr.honest(),
            processors,
            slots_run: tr.slots_run,
            known_at,
            confirmations,
            pos,
        })
    }

    fn p(&self, p: ProcessorId) -> usize {
        self.pos[&p]
    }

    pub fn known_at(&self, p: ProcessorId, idx: Idx) -> Option<Slot> {
        let k = self.known_at[self.p(p)][idx as usize];
        (k != UNKNOWN).then_some(k)
    }

    /// The message state of `p` after slot `t`.
    pub fn state(&self, p: ProcessorId, t: Slot) -> Vec<&Message> {
        self.known_at[self.p(p)]
            .iter()
            .enumerate()
            .filter(|(_, &k)| k <= t)
            .map(|(i, _)| self.ledger.msg(i as Idx))
            .collect()
    }

    pub fn state_size(&self, p: ProcessorId, t: Slot) -> usize {
        self.known_at[self.p(p)].iter().filter(|&&k| k <= t).count()
    }

    pub fn confirmations(&self, p: ProcessorId) -> &[Confirmed] {
        &self.confirmations[self.p(p)]
    }

    /// The confirmed chain of `p` after slot `t`, if any record covers it.
    pub fn confirmed_at(&self, p: ProcessorId, t: Slot) -> Option<Confirmed> {
        let recs = self.confirmations(p);
        let n = recs.partition_point(|c| c.slot <= t);
        n.checked_sub(1).map(|i| recs[i])
    }

    /// Confirmed lengths of `p` for slots `1..=slots_run` (index `t - 1`).
    pub fn length_series(&self, p: ProcessorId) -> Vec<u32> {
        let mut out = vec![0; self.slots_run as usize];
        let recs = self.confirmations(p);
        let mut j = 0;
        let mut cur = 0;
        for t in 1..=self.slots_run {
            while j < recs.len() && recs[j].slot <= t {
                cur = recs[j].length;
                j += 1;
            }
            out[t as usize - 1] = cur;
        }
        out
    }

    /// Two confirmed chains are compatible when one tip extends the other.
    /// The empty chain is compatible with everything.
    pub fn compatible(&self, a: Option<Idx>, b: Option<Idx>) -> bool {
        match (a, b) {
            (Some(a), Some(b)) => self.ledger.compatible(a, b),
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::presets::pow;
    use crate::engine::run_execution;

    #[test]
    fn replayed_sizes_match_recorded_sizes() {
        let tr = run_execution(&pow(120, &[1.0, 1.0, 1.0], 0.2, 2)).unwrap();
        let r = Replay::new(&tr).unwrap();
        assert_eq!(r.ledger.len(), tr.broadcasts.len() + 1);
        for c in &tr.confirmations {
            assert_eq!(r.state_size(c.processor, c.slot), c.state_size);
        }
        let p = ProcessorId(0);
        let series = r.length_series(p);
        assert_eq!(series.len(), 120);
        assert_eq!(*series.last().unwrap(), r.confirmed_at(p, 120).unwrap().length);
    }
}
