//! Adversarial strategies and the observer construction.

use serde::{Deserialize, Serialize};

use crate::config::{ExecutionConfig, ProcessorEntry, ProcessorSpec, Synchrony};
use crate::engine::{Behavior, StepCtx};
use crate::error::{ConfigError, Fault};
use crate::ledger::{Idx, GENESIS};
use crate::network::{ScheduleSpec, TimingPolicy};
use crate::permitter::MsgSetRef;
use crate::protocols::{honest_behavior, Miner, ProtocolSpec};
use crate::types::{MessageId, ProcessorId, Slot};

fn default_lag() -> u32 {
    6
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversarySpec {
    /// Follows the honest protocol.
    Passive,
    /// Withholds a fork started at the public tip and releases it once it is
    /// longer than a public branch that has buried its first block
    /// `confirm_depth` deep.
    PrivateFork {
        confirm_depth: u32,
        /// Abandon the fork when the public chain leads by more than this.
        #[serde(default = "default_lag")]
        give_up_lag: u32,
    },
    /// Builds a chain from genesis in private, ignoring everything received,
    /// and broadcasts all of it at `release_at` (never if 0).
    SimulationAttacker { release_at: Slot },
}

/// The state machine for a roster entry under a protocol.
pub fn behavior_for(entry: &ProcessorEntry, protocol: &ProtocolSpec) -> Box<dyn Behavior> {
    match &entry.adversary {
        None | Some(AdversarySpec::Passive) => honest_behavior(protocol),
        Some(AdversarySpec::PrivateFork {
            confirm_depth,
            give_up_lag,
        }) => Box::new(PrivateFork::new(
            Miner::for_protocol(protocol),
            *confirm_depth,
            *give_up_lag,
        )),
        Some(AdversarySpec::SimulationAttacker { release_at }) => Box::new(
            SimulationAttacker::new(Miner::for_protocol(protocol), *release_at),
        ),
    }
}

#[derive(Debug, Clone)]
pub struct PrivateFork {
    miner: Miner,
    depth: u32,
    lag: u32,
    base: Idx,
    private: Vec<Idx>,
    releases: u32,
}

impl PrivateFork {
    pub fn new(miner: Miner, depth: u32, lag: u32) -> Self {
        Self {
            miner,
            depth,
            lag,
            base: GENESIS,
            private: Vec::new(),
            releases: 0,
        }
    }

    pub fn releases(&self) -> u32 {
        self.releases
    }

    fn tip(&self) -> Idx {
        self.private.last().copied().unwrap_or(self.base)
    }
}

impl Behavior for PrivateFork {
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<(), Fault> {
        let public = ctx.view().best_tip();
        if self.private.is_empty() && !self.miner.binds_parent() {
            self.base = public;
        }
        if let Some(b) = self.miner.extend(ctx, self.tip()) {
            self.private.push(b);
        }
        if self.private.is_empty() {
            self.base = public;
        }
        let base_h = ctx.ledger().height(self.base);
        let pub_len = ctx.ledger().height(public).saturating_sub(base_h);
        let priv_len = self.private.len() as u32;
        if priv_len > pub_len && pub_len > self.depth {
            for b in std::mem::take(&mut self.private) {
                ctx.broadcast(b)?;
            }
            self.releases += 1;
            self.base = ctx.view().best_tip();
        } else if pub_len > priv_len + self.lag {
            self.private.clear();
            self.base = public;
        }
        let tip = self.tip();
        self.miner.request(ctx, tip, MsgSetRef::Chain(tip));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulationAttacker {
    miner: Miner,
    release_at: Slot,
    chain: Vec<Idx>,
    released: bool,
}

impl SimulationAttacker {
    pub fn new(miner: Miner, release_at: Slot) -> Self {
        Self {
            miner,
            release_at,
            chain: Vec::new(),
            released: false,
        }
    }
}

impl Behavior for SimulationAttacker {
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<(), Fault> {
        if self.released {
            return Ok(());
        }
        let tip = self.chain.last().copied().unwrap_or(GENESIS);
        if let Some(b) = self.miner.extend(ctx, tip) {
            self.chain.push(b);
        }
        if self.release_at > 0 && ctx.slot() >= self.release_at {
            for &b in &self.chain {
                ctx.broadcast(b)?;
            }
            self.released = true;
            return Ok(());
        }
        let tip = self.chain.last().copied().unwrap_or(GENESIS);
        self.miner.request(ctx, tip, MsgSetRef::Chain(tip));
        Ok(())
    }
}

/// The observer instance: the base roster plus two zero-balance honest
/// processors that hear nothing until the last slot, when each receives its
/// feed. Every slot is asynchronous; deliveries among the base processors
/// follow the base timing policy unchanged.
pub fn build_partition_instance(
    base: &ExecutionConfig,
    feeds: [Vec<MessageId>; 2],
) -> Result<ExecutionConfig, ConfigError> {
    if base.setting.synchrony == Synchrony::Synchronous {
        return Err(ConfigError::axis(
            "synchrony",
            "the observer construction needs the partially synchronous setting",
        ));
    }
    let n = base.processors().len() as u32;
    let observers = vec![ProcessorId(n), ProcessorId(n + 1)];
    let mut cfg = base.clone();
    cfg.roster.push(ProcessorSpec {
        count: 2,
        ..ProcessorSpec::honest(0.0)
    });
    cfg.schedule = ScheduleSpec {
        async_intervals: vec![[1, base.duration]],
    };
    cfg.timing = TimingPolicy::Isolate {
        processors: observers,
        release_at: base.duration,
        feeds: feeds.to_vec(),
        base: Box::new(base.timing.clone()),
    };
    Ok(cfg)
}

/// Ids of the two observers added by [`build_partition_instance`].
pub fn observer_ids(base: &ExecutionConfig) -> [ProcessorId; 2] {
    let n = base.processors().len() as u32;
    [ProcessorId(n), ProcessorId(n + 1)]
}
