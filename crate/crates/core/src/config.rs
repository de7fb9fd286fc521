//! Protocol-instance configuration and its validation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adversary::AdversarySpec;
use crate::error::ConfigError;
use crate::network::{ScheduleSpec, TimingPolicy};
use crate::permitter::PermitterSpec;
use crate::pool::PoolSpec;
use crate::protocols::{ConfirmationSpec, ProtocolSpec};
use crate::types::{ProcessorId, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    Timed,
    Untimed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sizing {
    Sized,
    Unsized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermitterMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synchrony {
    Synchronous,
    PartiallySynchronous,
}

/// The four setting axes an instance declares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub timing: Timing,
    pub sizing: Sizing,
    pub permitter: PermitterMode,
    pub synchrony: Synchrony,
}

fn one() -> u32 {
    1
}

fn is_one(x: &u32) -> bool {
    *x == 1
}

/// One roster line; `count` identical processors get consecutive ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorSpec {
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub count: u32,
    /// Resource balance of the processor, split evenly across its keys.
    pub balance: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub keys: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary: Option<AdversarySpec>,
}

impl ProcessorSpec {
    pub fn honest(balance: f64) -> Self {
        Self {
            count: 1,
            balance,
            keys: 1,
            adversary: None,
        }
    }

    pub fn adversary(balance: f64, strategy: AdversarySpec) -> Self {
        Self {
            count: 1,
            balance,
            keys: 1,
            adversary: Some(strategy),
        }
    }
}

/// A processor after roster expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorEntry {
    pub id: ProcessorId,
    pub balance: f64,
    pub keys: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary: Option<AdversarySpec>,
}

/// Items (I1)-(I6) of a protocol instance plus the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    /// `|D|`: slots `1..=duration` are executed.
    pub duration: Slot,
    pub delta: Slot,
    pub epsilon: f64,
    pub setting: Setting,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub roster: Vec<ProcessorSpec>,
    pub pool: PoolSpec,
    pub permitter: PermitterSpec,
    #[serde(default)]
    pub timing: TimingPolicy,
    pub protocol: ProtocolSpec,
    pub confirmation: ConfirmationSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ExecutionConfig {
    pub fn processors(&self) -> Vec<ProcessorEntry> {
        let mut out = Vec::new();
        for spec in &self.roster {
            for _ in 0..spec.count {
                out.push(ProcessorEntry {
                    id: ProcessorId(out.len() as u32),
                    balance: spec.balance,
                    keys: spec.keys,
                    adversary: spec.adversary.clone(),
                });
            }
        }
        out
    }

    pub fn adversary(&self) -> Option<ProcessorEntry> {
        self.processors().into_iter().find(|p| p.adversary.is_some())
    }

    pub fn honest_ids(&self) -> BTreeSet<ProcessorId> {
        self.processors()
            .into_iter()
            .filter(|p| p.adversary.is_none())
            .map(|p| p.id)
            .collect()
    }

    /// Checks everything that does not require building runtime objects.
    /// [`crate::engine::prepare`] performs the full validation.
    pub fn check_basic(&self) -> Result<(), ConfigError> {
        if self.duration < 1 {
            return Err(ConfigError::field("duration", "must be >= 1"));
        }
        if self.delta < 1 {
            return Err(ConfigError::field("delta", "must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ConfigError::field("epsilon", "must lie in (0, 1)"));
        }
        let procs = self.processors();
        if procs.is_empty() {
            return Err(ConfigError::field("roster", "needs at least one processor"));
        }
        let adversaries: u32 = self
            .roster
            .iter()
            .filter(|r| r.adversary.is_some())
            .map(|r| r.count)
            .sum();
        if adversaries > 1 {
            return Err(ConfigError::field("roster", "at most one adversary processor"));
        }
        if let Some(r) = self.roster.iter().find(|r| r.keys == 0) {
            return Err(ConfigError::field(
                "roster.keys",
                format!("must be >= 1 (balance {})", r.balance),
            ));
        }
        self.check_axes()
    }

    fn check_axes(&self) -> Result<(), ConfigError> {
        let s = self.setting;
        match self.permitter {
            PermitterSpec::Pow { rate } => {
                if s.timing != Timing::Untimed {
                    return Err(ConfigError::axis(
                        "timing",
                        "the block lottery permitter is untimed but the setting is timed",
                    ));
                }
                if s.permitter != PermitterMode::Single {
                    return Err(ConfigError::axis(
                        "permitter",
                        "the block lottery permitter is single-permitter",
                    ));
                }
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(ConfigError::field("permitter.rate", "must be > 0"));
                }
            }
            PermitterSpec::Pos { slot_rate } => {
                if s.timing != Timing::Timed {
                    return Err(ConfigError::axis(
                        "timing",
                        "the slot-leader permitter is timed but the setting is untimed",
                    ));
                }
                if s.permitter != PermitterMode::Multi {
                    return Err(ConfigError::axis(
                        "permitter",
                        "the slot-leader permitter is multi-permitter",
                    ));
                }
                if !(slot_rate > 0.0 && slot_rate <= 1.0) {
                    return Err(ConfigError::field("permitter.slot_rate", "must lie in (0, 1]"));
                }
            }
        }
        let protocol_timing = match self.protocol {
            ProtocolSpec::PowLongestChain => Timing::Untimed,
            ProtocolSpec::PosLongestChain { lookahead } => {
                if lookahead < 1 {
                    return Err(ConfigError::field("protocol.lookahead", "must be >= 1"));
                }
                Timing::Timed
            }
        };
        if protocol_timing != s.timing {
            return Err(ConfigError::axis(
                "timing",
                format!(
                    "protocol is {:?} but the setting is {:?}",
                    protocol_timing, s.timing
                ),
            ));
        }
        if let ConfirmationSpec::Density(_) = self.confirmation {
            if s.timing != Timing::Timed {
                return Err(ConfigError::axis(
                    "timing",
                    "the density confirmation rule needs timestamps",
                ));
            }
            if s.sizing != Sizing::Sized {
                return Err(ConfigError::axis(
                    "sizing",
                    "the density confirmation rule needs a sized pool",
                ));
            }
        }
        if s.synchrony == Synchrony::Synchronous && !self.schedule.async_intervals.is_empty() {
            return Err(ConfigError::axis(
                "synchrony",
                "the synchronous setting labels every slot synchronous",
            ));
        }
        Ok(())
    }
}

/// Small ready-made honest instances: synchronous, constant sized pool, one
/// key per processor, `Δ = 2`, `ε = 0.1`, seed 1.
pub mod presets {
    use super::*;
    use crate::pool::{AdversaryBound, PoolFamily, Profile};
    use crate::protocols::ConfirmationSpec;

    /// Block lottery with per-slot honest block rate `rate`.
    pub fn pow(duration: Slot, balances: &[f64], rate: f64, k: u32) -> ExecutionConfig {
        ExecutionConfig {
            duration,
            delta: 2,
            epsilon: 0.1,
            setting: Setting {
                timing: Timing::Untimed,
                sizing: Sizing::Sized,
                permitter: PermitterMode::Single,
                synchrony: Synchrony::Synchronous,
            },
            schedule: ScheduleSpec::default(),
            roster: balances.iter().map(|&b| ProcessorSpec::honest(b)).collect(),
            pool: PoolSpec {
                family: PoolFamily::Hashrate,
                profile: Profile::Constant,
                bounds: None,
                resample_total: false,
                adversary_bound: AdversaryBound::Fraction { q: 0.0 },
            },
            permitter: PermitterSpec::Pow { rate },
            timing: TimingPolicy::default(),
            protocol: ProtocolSpec::PowLongestChain,
            confirmation: ConfirmationSpec::KDeep { k },
            seed: 1,
        }
    }

    /// Slot-leader lottery with leader rate `slot_rate` and lookahead 1.
    pub fn pos(duration: Slot, balances: &[f64], slot_rate: f64, k: u32) -> ExecutionConfig {
        ExecutionConfig {
            setting: Setting {
                timing: Timing::Timed,
                sizing: Sizing::Sized,
                permitter: PermitterMode::Multi,
                synchrony: Synchrony::Synchronous,
            },
            pool: PoolSpec {
                family: PoolFamily::Stake {
                    coinbase_reward: 0.0,
                    lookback: 0,
                },
                profile: Profile::Constant,
                bounds: None,
                resample_total: false,
                adversary_bound: AdversaryBound::Fraction { q: 0.0 },
            },
            permitter: PermitterSpec::Pos { slot_rate },
            protocol: ProtocolSpec::PosLongestChain { lookahead: 1 },
            ..pow(duration, balances, 1.0, k)
        }
    }
}
