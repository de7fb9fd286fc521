//! Permitter oracles: the lottery that grants permission to broadcast.
//!
//! Both built-in oracles are proportional lotteries. Draws come from keyed
//! substreams so a request's verdict depends only on the seed, the request
//! and the relevant balance.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::config::PermitterMode;
use crate::error::Violation;
use crate::ledger::{Idx, Ledger};
use crate::pool::{ChainRef, ResourcePool};
use crate::config::Sizing;
use crate::rng::{SeedTree, Stream};
use crate::types::{Message, MessageId, PublicKey, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PermitterSpec {
    /// Untimed, single-permitter block lottery; `rate` is the expected number
    /// of grants per slot when the whole pool requests.
    Pow { rate: f64 },
    /// Timed, multi-permitter slot-leader lottery; `slot_rate` is the
    /// probability that some key leads a given slot.
    Pos { slot_rate: f64 },
}

/// The message set `M` named by a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgSetRef {
    /// The requester's whole message state.
    State,
    /// The chain ending at this block, which must be in the requester's
    /// state or already permitted to it.
    Chain(Idx),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermitRequest {
    pub key: PublicKey,
    pub target_slot: Option<Slot>,
    pub msg_set: MsgSetRef,
    /// `A`: for the block lottery, the candidate block.
    pub extra: Option<Message>,
}

/// A granted permission set `M*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Permit {
    /// Exactly one message.
    Exact(Idx),
    /// Every block signed by `key` with timestamp `slot` whose parent has a
    /// smaller timestamp.
    Timestamped { key: PublicKey, slot: Slot },
}

/// Serializable form of a grant, for transcripts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum PermitRecord {
    Exact { message: MessageId },
    Timestamped { slot: Slot },
}

/// The non-empty permission sets an oracle can answer with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Granted {
    /// The candidate block named in the request.
    Block(Message),
    /// All blocks with this timestamp, signed by the requesting key.
    Timestamped { slot: Slot },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermitResponse {
    pub key: PublicKey,
    /// `None` is the empty set.
    pub permitted: Option<Granted>,
}

/// Everything a processor is currently permitted to broadcast.
#[derive(Debug, Clone, Default)]
pub struct PermitStore {
    exact: HashSet<Idx>,
    timestamped: HashSet<(PublicKey, Slot)>,
}

impl PermitStore {
    pub fn add(&mut self, p: Permit) {
        match p {
            Permit::Exact(i) => {
                self.exact.insert(i);
            }
            Permit::Timestamped { key, slot } => {
                self.timestamped.insert((key, slot));
            }
        }
    }

    pub fn has_exact(&self, idx: Idx) -> bool {
        self.exact.contains(&idx)
    }

    pub fn has_slot(&self, key: PublicKey, slot: Slot) -> bool {
        self.timestamped.contains(&(key, slot))
    }

    /// True if `idx` is in `M*` for one of the grants.
    pub fn permits(&self, ledger: &Ledger, idx: Idx) -> bool {
        if self.exact.contains(&idx) {
            return true;
        }
        let e = ledger.entry(idx);
        let (Some(ts), Some(parent)) = (e.msg.timestamp, e.parent) else {
            return false;
        };
        e.msg.parent().is_some()
            && self.timestamped.contains(&(e.msg.signer, ts))
            && ledger.entry(parent).msg.timestamp.unwrap_or(0) < ts
    }
}

/// Block lottery. Grants the candidate with probability
/// `min(1, rate * R(U,t,M) / N)`, where `N` is `T(t, M)` for a sized pool and
/// `α₀` for an unsized one, so the verdict never depends on the hidden total.
///
/// `valid_candidate` says whether `A` extends a leaf of a longest chain of `M`;
/// invalid candidates are refused without a draw.
pub fn pow_permitter(
    req: &PermitRequest,
    valid_candidate: bool,
    m: Option<ChainRef<'_>>,
    pool: &ResourcePool,
    rate: f64,
    t: Slot,
    seeds: &SeedTree,
) -> Result<PermitResponse, Violation> {
    if req.target_slot.is_some() {
        return Err(Violation::SettingMismatch {
            reason: "timed request sent to an untimed permitter".into(),
        });
    }
    let empty = PermitResponse {
        key: req.key,
        permitted: None,
    };
    let Some(candidate) = req.extra.as_ref().filter(|_| valid_candidate) else {
        return Ok(empty);
    };
    let p = pow_grant_probability(req.key, m, pool, rate, t);
    if p > 0.0 && seeds.uniform(Stream::PowGrant(req.key, t)) < p {
        Ok(PermitResponse {
            key: req.key,
            permitted: Some(Granted::Block(candidate.clone())),
        })
    } else {
        Ok(empty)
    }
}

pub fn pow_grant_probability(
    key: PublicKey,
    m: Option<ChainRef<'_>>,
    pool: &ResourcePool,
    rate: f64,
    t: Slot,
) -> f64 {
    let r = pool.balance(key, t, m);
    if r == 0.0 {
        return 0.0;
    }
    let norm = match pool.sizing() {
        Sizing::Sized => pool.total(t, m),
        Sizing::Unsized => pool.lower_bound().expect("unsized pool has bounds"),
    };
    (rate * r / norm).min(1.0)
}

/// Slot-leader lottery. One uniform draw per target slot is shared by all
/// keys; keys sorted by `(owner, index)` occupy consecutive segments of
/// `[0, slot_rate)` proportional to stake, so each key leads with probability
/// `slot_rate * R / T` and at most one key leads a slot.
pub fn pos_permitter(
    req: &PermitRequest,
    m: Option<ChainRef<'_>>,
    pool: &ResourcePool,
    slot_rate: f64,
    seeds: &SeedTree,
) -> Result<PermitResponse, Violation> {
    let Some(target) = req.target_slot else {
        return Err(Violation::SettingMismatch {
            reason: "untimed request sent to a timed permitter".into(),
        });
    };
    if req.extra.is_some() {
        return Err(Violation::NonEmptyExtra { key: req.key });
    }
    let empty = PermitResponse {
        key: req.key,
        permitted: None,
    };
    let bals = pool.key_balances(target, m);
    let total: f64 = bals.iter().map(|b| b.1).sum();
    let mut start = 0.0;
    let mut own = 0.0;
    for &(k, b) in &bals {
        if k == req.key {
            own = b;
            break;
        }
        start += b;
    }
    if own == 0.0 || total <= 0.0 {
        return Ok(empty);
    }
    let u = seeds.uniform(Stream::PosLeader(target));
    let lo = slot_rate * start / total;
    let hi = slot_rate * (start + own) / total;
    if lo <= u && u < hi {
        Ok(PermitResponse {
            key: req.key,
            permitted: Some(Granted::Timestamped { slot: target }),
        })
    } else {
        Ok(empty)
    }
}

/// Checks one processor's requests for one slot against the setting's budget.
pub fn enforce_request_budget(
    requests: &[PermitRequest],
    mode: PermitterMode,
) -> Result<(), Violation> {
    match mode {
        PermitterMode::Single => {
            let mut seen = HashSet::new();
            for r in requests {
                if !seen.insert(r.key) {
                    return Err(Violation::RequestBudget { key: r.key });
                }
            }
        }
        PermitterMode::Multi => {
            if let Some(r) = requests.iter().find(|r| r.extra.is_some()) {
                return Err(Violation::NonEmptyExtra { key: r.key });
            }
        }
    }
    Ok(())
}
