//! Reference longest-chain protocols and their confirmation rules.

pub mod confirmation;
pub mod density;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use confirmation::{
    confirm_k_deep, k_deep_tip, k_for, ConfirmState, ConfirmationSpec, KEntry, Rule,
};
pub use density::{
    confirm_density, density_threshold, density_witness, interval_length_r, production_rates,
    sublinearity_bound, DensityParams, DensitySpec, DensityState, DensityWitness,
};

use crate::engine::{Behavior, Grant, StepCtx};
use crate::error::Fault;
use crate::ledger::{Idx, Ledger};
use crate::permitter::{MsgSetRef, PermitRequest};
use crate::types::{Message, MessageId, PublicKey, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolSpec {
    /// Untimed longest chain over the block lottery.
    PowLongestChain,
    /// Timed longest chain over the slot-leader lottery; requests look
    /// `lookahead` slots ahead.
    PosLongestChain { lookahead: Slot },
}

/// The block-lottery candidate extending `parent`: the slot number signed by
/// `key`.
pub fn pow_candidate(ledger: &Ledger, key: PublicKey, parent: Idx, slot: Slot) -> Message {
    Message::block(key, ledger.id(parent), slot.to_le_bytes().to_vec(), None)
}

/// How a processor obtains blocks extending a tip it chose, shared by honest
/// and adversarial strategies.
#[derive(Debug, Clone)]
pub enum Miner {
    Pow,
    Pos { lookahead: Slot, requested_upto: Slot },
}

impl Miner {
    pub fn for_protocol(p: &ProtocolSpec) -> Self {
        match *p {
            ProtocolSpec::PowLongestChain => Miner::Pow,
            ProtocolSpec::PosLongestChain { lookahead } => Miner::Pos {
                lookahead,
                requested_upto: 0,
            },
        }
    }

    /// True when a grant is bound to the parent named at request time.
    pub fn binds_parent(&self) -> bool {
        matches!(self, Miner::Pow)
    }

    /// A block extending `tip` that the processor may broadcast now, if any.
    /// Block-lottery grants are tied to their parent; a slot-leader permit
    /// for the current slot yields a fresh block on `tip`.
    pub fn extend(&mut self, ctx: &mut StepCtx<'_>, tip: Idx) -> Option<Idx> {
        match self {
            Miner::Pow => ctx.grants().iter().find_map(|g| match *g {
                Grant::Block { idx, .. } if ctx.ledger().parent(idx) == Some(tip) => Some(idx),
                _ => None,
            }),
            Miner::Pos { .. } => {
                let t = ctx.slot();
                if ctx.ledger().msg(tip).timestamp.unwrap_or(0) >= t {
                    return None;
                }
                let key = ctx.keys().find(|k| ctx.permits().has_slot(*k, t))?;
                Some(ctx.create_block(key, tip, Vec::new(), Some(t)))
            }
        }
    }

    /// Requests permission to extend `tip`, naming `m` as the message set.
    pub fn request(&mut self, ctx: &mut StepCtx<'_>, tip: Idx, m: MsgSetRef) {
        let t = ctx.slot();
        let keys: Vec<PublicKey> = ctx.keys().collect();
        match self {
            Miner::Pow => {
                for key in keys {
                    let cand = pow_candidate(ctx.ledger(), key, tip, t);
                    ctx.request(PermitRequest {
                        key,
                        target_slot: None,
                        msg_set: m,
                        extra: Some(cand),
                    });
                }
            }
            Miner::Pos {
                lookahead,
                requested_upto,
            } => {
                let from = (*requested_upto + 1).max(t + 1);
                for target in from..=t + *lookahead {
                    for &key in &keys {
                        ctx.request(PermitRequest {
                            key,
                            target_slot: Some(target),
                            msg_set: MsgSetRef::Chain(tip),
                            extra: None,
                        });
                    }
                }
                *requested_upto = (*requested_upto).max(t + *lookahead);
            }
        }
    }
}

/// Honest block-lottery processor: broadcasts every granted block and asks
/// to extend the longest chain of its state (smallest tip id on ties).
#[derive(Debug, Clone, Default)]
pub struct PowHonest;

impl Behavior for PowHonest {
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<(), Fault> {
        let granted: Vec<Idx> = ctx
            .grants()
            .iter()
            .filter_map(|g| match *g {
                Grant::Block { idx, .. } => Some(idx),
                Grant::Slot { .. } => None,
            })
            .collect();
        for idx in granted {
            ctx.broadcast(idx)?;
        }
        let tip = ctx.view().best_tip();
        Miner::Pow.request(ctx, tip, MsgSetRef::State);
        Ok(())
    }
}

/// Honest slot-leader processor: leads at most once per slot, always on the
/// longest chain, and keeps its requests `lookahead` slots ahead.
#[derive(Debug, Clone)]
pub struct PosHonest {
    miner: Miner,
}

impl PosHonest {
    pub fn new(lookahead: Slot) -> Self {
        Self {
            miner: Miner::Pos {
                lookahead,
                requested_upto: 0,
            },
        }
    }
}

impl Behavior for PosHonest {
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<(), Fault> {
        let tip = ctx.view().best_tip();
        if let Some(b) = self.miner.extend(ctx, tip) {
            ctx.broadcast(b)?;
        }
        let tip = ctx.view().best_tip();
        self.miner.request(ctx, tip, MsgSetRef::Chain(tip));
        Ok(())
    }
}

pub fn honest_behavior(p: &ProtocolSpec) -> Box<dyn Behavior> {
    match *p {
        ProtocolSpec::PowLongestChain => Box::new(PowHonest),
        ProtocolSpec::PosLongestChain { lookahead } => Box::new(PosHonest::new(lookahead)),
    }
}

/// The block each message is attached to. Blocks attach to themselves; other
/// messages attach to the first block they embed.
#[derive(Debug, Clone, Default)]
pub struct AttachmentMap {
    attached: HashMap<MessageId, MessageId>,
}

impl AttachmentMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, m: &Message, is_block: impl Fn(&MessageId) -> bool) {
        let target = if m.is_block() {
            Some(m.id)
        } else {
            m.embedded.iter().copied().find(|e| is_block(e))
        };
        if let Some(t) = target {
            self.attached.insert(m.id, t);
        }
    }

    pub fn get(&self, id: &MessageId) -> Option<MessageId> {
        self.attached.get(id).copied()
    }
}
