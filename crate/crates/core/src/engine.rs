//! The timeslot engine.
//!
//! At every slot each processor, in id order, receives the messages the
//! timing rule delivers and the permission sets answering its previous
//! requests, then takes one step: it broadcasts permitted messages and files
//! new requests. Its confirmed chain is updated afterwards. Permitter answers
//! to requests made at `t` arrive at `t + 1`.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::adversary::behavior_for;
use crate::config::{ExecutionConfig, ProcessorEntry, Sizing, Synchrony};
use crate::error::{ConfigError, Fault, Violation};
use crate::ledger::{Idx, Ledger, View};
use crate::network::{build_timing_rule, SynchronySchedule, TimingRule};
use crate::permitter::{
    enforce_request_budget, pos_permitter, pow_permitter, Granted, MsgSetRef, Permit,
    PermitRecord, PermitRequest, PermitStore, PermitterSpec,
};
use crate::pool::{
    dominates, is_q_bounded, sample_unsized_pool, AdversaryBound, ChainRef, PoolFamily, Profile,
    ResourcePool,
};
use crate::protocols::{confirmation::confirmed_length, ConfirmState, Rule};
use crate::rng::{SeedTree, Stream};
use crate::transcript::{
    BroadcastRecord, ConfirmationRecord, DeliveryRecord, GrantRecord, Header, Transcript,
    FORMAT_VERSION,
};
use crate::types::{Message, MessageId, ProcessorId, PublicKey, Slot};

/// A processor's state machine.
pub trait Behavior: Send {
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<(), Fault>;
}

/// A permission set as handed to a processor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grant {
    /// Permission to broadcast exactly this block.
    Block { key: PublicKey, idx: Idx },
    /// Permission for every block signed by `key` stamped `slot`.
    Slot { key: PublicKey, slot: Slot },
}

/// Everything a processor can see and do during its step.
pub struct StepCtx<'a> {
    slot: Slot,
    me: ProcessorId,
    keys: u32,
    ledger: &'a mut Ledger,
    view: &'a mut View,
    permits: &'a PermitStore,
    received: &'a [Idx],
    grants: &'a [Grant],
    pool: Option<&'a ResourcePool>,
    seeds: SeedTree,
    broadcasts: Vec<Idx>,
    requests: Vec<PermitRequest>,
}

impl<'a> StepCtx<'a> {
    pub fn slot(&self) -> Slot {
        self.slot
    }

    pub fn me(&self) -> ProcessorId {
        self.me
    }

    /// The processor's keys. Keys are minted by index; the engine hands out
    /// as many as the roster entry declares.
    pub fn keys(&self) -> impl Iterator<Item = PublicKey> + 'static {
        let me = self.me;
        (0..self.keys).map(move |i| PublicKey::new(me, i))
    }

    pub fn ledger(&self) -> &Ledger {
        self.ledger
    }

    pub fn view(&self) -> &View {
        self.view
    }

    pub fn permits(&self) -> &PermitStore {
        self.permits
    }

    /// Messages delivered this slot, in delivery order.
    pub fn received(&self) -> &[Idx] {
        self.received
    }

    /// Permission sets that arrived this slot.
    pub fn grants(&self) -> &[Grant] {
        self.grants
    }

    /// The resource pool, when the setting makes it a determined input.
    pub fn pool(&self) -> Result<&ResourcePool, Fault> {
        self.pool.ok_or(Fault {
            processor: Some(self.me),
            slot: self.slot,
            violation: Violation::HiddenPool,
        })
    }

    /// Private randomness for this processor and slot.
    pub fn rng(&self) -> ChaCha8Rng {
        self.seeds.rng(Stream::Processor(self.me, self.slot))
    }

    /// Materializes a block without broadcasting it.
    pub fn create_block(
        &mut self,
        key: PublicKey,
        parent: Idx,
        payload: Vec<u8>,
        timestamp: Option<Slot>,
    ) -> Idx {
        let m = Message::block(key, self.ledger.id(parent), payload, timestamp);
        self.ledger.insert(m).expect("parent is in the ledger")
    }

    /// Materializes an arbitrary message. Fails if its parent is unknown.
    pub fn create_message(&mut self, m: Message) -> Option<Idx> {
        self.ledger.insert(m)
    }

    fn fault(&self, violation: Violation) -> Fault {
        Fault {
            processor: Some(self.me),
            slot: self.slot,
            violation,
        }
    }

    /// Broadcasts a message after checking it against the broadcast rules.
    /// The message joins the sender's own state at once.
    pub fn broadcast(&mut self, idx: Idx) -> Result<(), Fault> {
        validate_broadcast(self.me, self.ledger, self.view, self.permits, idx)
            .map_err(|v| self.fault(v))?;
        if self.view.insert(self.ledger, idx) || !self.broadcasts.contains(&idx) {
            self.broadcasts.push(idx);
        }
        Ok(())
    }

    pub fn request(&mut self, req: PermitRequest) {
        self.requests.push(req);
    }
}

/// The broadcast rules: the message is signed by one of the sender's keys and
/// permitted for it, every embedded signature is the sender's own or was
/// received, and a block's parent is already in the sender's state.
pub fn validate_broadcast(
    me: ProcessorId,
    ledger: &Ledger,
    view: &View,
    permits: &PermitStore,
    idx: Idx,
) -> Result<(), Violation> {
    let e = ledger.entry(idx);
    let m = &e.msg;
    if m.signer.owner != me || !permits.permits(ledger, idx) {
        return Err(Violation::Unpermitted { message: m.id });
    }
    for emb in &m.embedded {
        let own = ledger.get(emb).is_some_and(|i| ledger.msg(i).signer.owner == me);
        if !own && !view.contains_signed(ledger, emb) {
            return Err(Violation::ForgedEmbedding {
                message: m.id,
                embedded: *emb,
            });
        }
    }
    if let Some(p) = e.parent {
        if !view.knows(p) {
            return Err(Violation::ParentNotInState {
                message: m.id,
                parent: ledger.id(p),
            });
        }
    }
    Ok(())
}

/// A configuration with its runtime objects built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExecutionConfig,
    pub processors: Vec<ProcessorEntry>,
    pub schedule: SynchronySchedule,
    pub timing: TimingRule,
    pub pool: ResourcePool,
    pub rule: Rule,
}

fn check_adversary_bound(
    cfg: &ExecutionConfig,
    procs: &[ProcessorEntry],
    pool: &ResourcePool,
) -> Result<(), ConfigError> {
    let adv: BTreeSet<ProcessorId> = procs
        .iter()
        .filter(|p| p.adversary.is_some())
        .map(|p| p.id)
        .collect();
    let honest: BTreeSet<ProcessorId> = procs
        .iter()
        .filter(|p| p.adversary.is_none())
        .map(|p| p.id)
        .collect();
    if adv.is_empty() {
        return Ok(());
    }
    // Base balances scale uniformly over time, so the endpoints and the step
    // suffice when no rewards accrue.
    let mut slots = vec![1, cfg.duration];
    if let Profile::Step { at, .. } = cfg.pool.profile {
        slots.push(at.clamp(1, cfg.duration));
    }
    let points: Vec<_> = slots.into_iter().map(|t| (t, None)).collect();
    let ok = match cfg.pool.adversary_bound {
        AdversaryBound::Fraction { q } => {
            if !(0.0..=1.0).contains(&q) {
                return Err(ConfigError::field("pool.adversary_bound.q", "must lie in [0, 1]"));
            }
            is_q_bounded(pool, &adv, q, &points)
        }
        AdversaryBound::Domination { theta } => {
            if !(theta > 1.0) {
                return Err(ConfigError::field("pool.adversary_bound.theta", "must exceed 1"));
            }
            dominates(pool, &honest, &adv, theta, &points)
        }
    };
    if ok {
        Ok(())
    } else {
        Err(ConfigError::field(
            "pool.adversary_bound",
            "the adversary's balance breaks the declared bound",
        ))
    }
}

/// Validates a configuration and builds its runtime objects.
pub fn prepare(cfg: &ExecutionConfig) -> Result<Prepared, ConfigError> {
    cfg.check_basic()?;
    let processors = cfg.processors();
    let ids: Vec<ProcessorId> = processors.iter().map(|p| p.id).collect();
    let schedule = SynchronySchedule::new(&cfg.schedule, cfg.duration, cfg.delta)?;
    let timing = build_timing_rule(
        &cfg.timing,
        &schedule,
        cfg.setting.synchrony,
        cfg.delta,
        &ids,
        cfg.seed,
    )?;
    for p in cfg.timing.isolated() {
        let entry = processors.iter().find(|e| e.id == p);
        if entry.is_some_and(|e| e.balance != 0.0) {
            return Err(ConfigError::field(
                "roster.balance",
                format!("isolated processor {p} must hold zero balance"),
            ));
        }
    }
    if cfg.setting.synchrony == Synchrony::Synchronous && !schedule.all_sync() {
        return Err(ConfigError::axis("synchrony", "asynchronous slots in the synchronous setting"));
    }
    let roster: Vec<(ProcessorId, f64, u32)> =
        processors.iter().map(|p| (p.id, p.balance, p.keys)).collect();
    let pool = match cfg.setting.sizing {
        Sizing::Unsized if cfg.pool.resample_total => {
            sample_unsized_pool(&cfg.pool, &roster, cfg.duration, cfg.seed)?
        }
        s => ResourcePool::new(&cfg.pool, s, &roster, cfg.duration)?,
    };
    if let (PoolFamily::Stake { .. }, PermitterSpec::Pow { .. }) = (&cfg.pool.family, cfg.permitter)
    {
        return Err(ConfigError::field(
            "pool.family",
            "the block lottery draws on a hashrate pool",
        ));
    }
    let owners: BTreeSet<ProcessorId> = ids.iter().copied().collect();
    pool.check_conditions(1, None, &owners)
        .map_err(|e| ConfigError::field("pool", e))?;
    check_adversary_bound(cfg, &processors, &pool)?;
    let slot_rate = match cfg.permitter {
        PermitterSpec::Pos { slot_rate } => Some(slot_rate),
        PermitterSpec::Pow { .. } => None,
    };
    let rule = Rule::resolve(&cfg.confirmation, cfg.epsilon, cfg.duration, slot_rate)?;
    Ok(Prepared {
        config: cfg.clone(),
        processors,
        schedule,
        timing,
        pool,
        rule,
    })
}

/// Custom state machines by roster entry; `None` falls back to the configured
/// strategy.
pub type BehaviorFactory<'a> = &'a dyn Fn(&ProcessorEntry) -> Option<Box<dyn Behavior>>;

/// Runs an execution. Configuration errors are reported before slot 1; an
/// illegal action aborts the run and is recorded in the transcript.
pub fn run_execution(cfg: &ExecutionConfig) -> Result<Transcript, ConfigError> {
    run_with(cfg, &|_| None)
}

pub fn run_with(
    cfg: &ExecutionConfig,
    custom: BehaviorFactory<'_>,
) -> Result<Transcript, ConfigError> {
    let prep = prepare(cfg)?;
    Ok(run_prepared(&prep, custom))
}

struct Proc {
    entry: ProcessorEntry,
    view: View,
    permits: PermitStore,
    behavior: Box<dyn Behavior>,
    confirm: ConfirmState,
    pending: Vec<(Grant, GrantRecord)>,
    last: Option<(u32, Option<MessageId>, usize)>,
}

struct Inbound {
    receiver: usize,
    idx: Idx,
    sender: ProcessorId,
    sent: Slot,
}

pub fn run_prepared(prep: &Prepared, custom: BehaviorFactory<'_>) -> Transcript {
    let cfg = &prep.config;
    let seeds = SeedTree::new(cfg.seed);
    let ids: Vec<ProcessorId> = prep.processors.iter().map(|p| p.id).collect();
    let owners: BTreeSet<ProcessorId> = ids.iter().copied().collect();
    let mut tr = Transcript::new(Header {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        processors: prep.processors.clone(),
    });
    let mut ledger = Ledger::new();
    let mut procs: Vec<Proc> = prep
        .processors
        .iter()
        .map(|e| Proc {
            entry: e.clone(),
            view: View::new(),
            permits: PermitStore::default(),
            behavior: custom(e).unwrap_or_else(|| behavior_for(e, &cfg.protocol)),
            confirm: ConfirmState::new(&prep.rule),
            pending: Vec::new(),
            last: None,
        })
        .collect();
    let mut inbox: BTreeMap<Slot, Vec<Inbound>> = BTreeMap::new();
    let pool_visible = (cfg.setting.sizing == Sizing::Sized).then_some(&prep.pool);
    let static_pool = matches!(cfg.pool.profile, Profile::Constant)
        && !matches!(cfg.pool.family, PoolFamily::Stake { coinbase_reward, .. } if coinbase_reward > 0.0);

    for t in 1..=cfg.duration {
        if !static_pool {
            if let Err(e) = prep.pool.check_conditions(t, None, &owners) {
                tr.fault = Some(Fault {
                    processor: None,
                    slot: t,
                    violation: Violation::Other { reason: e },
                });
                return tr;
            }
        }
        let mut arriving: Vec<Vec<(Idx, ProcessorId, Slot)>> = vec![Vec::new(); procs.len()];
        for d in inbox.remove(&t).unwrap_or_default() {
            arriving[d.receiver].push((d.idx, d.sender, d.sent));
        }
        for (pi, arrivals) in arriving.into_iter().enumerate() {
            if let Err(f) = step_one(
                prep,
                &seeds,
                t,
                pi,
                arrivals,
                &mut procs,
                &mut ledger,
                &mut inbox,
                &mut tr,
                pool_visible,
            ) {
                tr.fault = Some(f);
                return tr;
            }
        }
        tr.slots_run = t;
    }
    tr
}

#[allow(clippy::too_many_arguments)]
fn step_one(
    prep: &Prepared,
    seeds: &SeedTree,
    t: Slot,
    pi: usize,
    arrivals: Vec<(Idx, ProcessorId, Slot)>,
    procs: &mut [Proc],
    ledger: &mut Ledger,
    inbox: &mut BTreeMap<Slot, Vec<Inbound>>,
    tr: &mut Transcript,
    pool_visible: Option<&ResourcePool>,
) -> Result<(), Fault> {
    let cfg = &prep.config;
    let n = procs.len();
    let p = &mut procs[pi];
    let me = p.entry.id;
    let mut received = Vec::with_capacity(arrivals.len());
    for (idx, sender, sent) in arrivals {
        p.view.insert(ledger, idx);
        received.push(idx);
        tr.deliveries.push(DeliveryRecord {
            slot: t,
            receiver: me,
            message: ledger.id(idx),
            sender,
            sent_slot: sent,
        });
    }
    let mut grants = Vec::with_capacity(p.pending.len());
    for (g, rec) in p.pending.drain(..) {
        p.permits.add(match g {
            Grant::Block { idx, .. } => Permit::Exact(idx),
            Grant::Slot { key, slot } => Permit::Timestamped { key, slot },
        });
        grants.push(g);
        tr.grants.push(rec);
    }
    let mut ctx = StepCtx {
        slot: t,
        me,
        keys: p.entry.keys,
        ledger,
        view: &mut p.view,
        permits: &p.permits,
        received: &received,
        grants: &grants,
        pool: pool_visible,
        seeds: *seeds,
        broadcasts: Vec::new(),
        requests: Vec::new(),
    };
    p.behavior.step(&mut ctx)?;
    let StepCtx {
        broadcasts,
        requests,
        ..
    } = ctx;

    for idx in broadcasts {
        ledger.mark_broadcast(idx, t, me);
        let msg = ledger.msg(idx).clone();
        for (ri, other) in prep.processors.iter().enumerate().take(n) {
            if ri == pi {
                continue;
            }
            let d = prep
                .timing
                .checked_delivery(&prep.schedule, me, other.id, msg.id, t)
                .map_err(|v| Fault {
                    processor: None,
                    slot: t,
                    violation: v,
                })?;
            if let Some(d) = d {
                inbox.entry(d).or_default().push(Inbound {
                    receiver: ri,
                    idx,
                    sender: me,
                    sent: t,
                });
            }
        }
        tr.broadcasts.push(BroadcastRecord {
            slot: t,
            sender: me,
            message: msg,
        });
    }

    let fault = |v: Violation| Fault {
        processor: Some(me),
        slot: t,
        violation: v,
    };
    enforce_request_budget(&requests, cfg.setting.permitter).map_err(fault)?;
    let p = &mut procs[pi];
    for req in requests {
        if req.key.owner != me || req.key.index >= p.entry.keys {
            return Err(fault(Violation::ForeignKey { key: req.key }));
        }
        let tip = match req.msg_set {
            MsgSetRef::State => p.view.best_tip(),
            MsgSetRef::Chain(c) => {
                if (c as usize) >= ledger.len()
                    || !(p.view.knows(c) || p.permits.permits(ledger, c))
                {
                    return Err(fault(Violation::ForeignMessageSet { key: req.key }));
                }
                c
            }
        };
        let m = Some(ChainRef { ledger, tip });
        let resp = match cfg.permitter {
            PermitterSpec::Pow { rate } => {
                let valid = req.extra.as_ref().is_some_and(|c| {
                    c.signer == req.key
                        && c.timestamp.is_none()
                        && c.parent().and_then(|pid| ledger.get(&pid)).is_some_and(|par| {
                            match req.msg_set {
                                MsgSetRef::State => {
                                    p.view.is_rooted(par)
                                        && ledger.height(par) == ledger.height(tip)
                                }
                                MsgSetRef::Chain(c) => par == c,
                            }
                        })
                });
                pow_permitter(&req, valid, m, &prep.pool, rate, t, seeds)
            }
            PermitterSpec::Pos { slot_rate } => {
                pos_permitter(&req, m, &prep.pool, slot_rate, seeds)
            }
        }
        .map_err(fault)?;
        match resp.permitted {
            None => {}
            Some(Granted::Block(msg)) => {
                let id = msg.id;
                let idx = ledger.insert(msg).expect("valid candidate has a known parent");
                p.pending.push((
                    Grant::Block { key: req.key, idx },
                    GrantRecord {
                        slot: t + 1,
                        key: req.key,
                        target_slot: None,
                        permit: PermitRecord::Exact { message: id },
                    },
                ));
            }
            Some(Granted::Timestamped { slot }) => p.pending.push((
                Grant::Slot { key: req.key, slot },
                GrantRecord {
                    slot: t + 1,
                    key: req.key,
                    target_slot: Some(slot),
                    permit: PermitRecord::Timestamped { slot },
                },
            )),
        }
    }

    let tip = p.confirm.update(&prep.rule, ledger, &mut p.view);
    let now = (
        confirmed_length(ledger, tip),
        tip.map(|i| ledger.id(i)),
        p.view.size(),
    );
    if t == 1 || p.last.as_ref() != Some(&now) {
        tr.confirmations.push(ConfirmationRecord {
            slot: t,
            processor: me,
            length: now.0,
            tip: now.1,
            state_size: now.2,
        });
        p.last = Some(now);
    }
    Ok(())
}

/// Slots at which grants for `key` arrived; equal sequences mean equal
/// lottery outcomes in coupled executions.
pub fn grant_slots(tr: &Transcript, key: PublicKey) -> Vec<Slot> {
    tr.grants.iter().filter(|g| g.key == key).map(|g| g.slot).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::AdversarySpec;
    use crate::config::presets::{pos, pow};
    use crate::config::ProcessorSpec;

    fn final_tips(tr: &Transcript) -> BTreeMap<ProcessorId, Option<MessageId>> {
        tr.confirmations.iter().map(|c| (c.processor, c.tip)).collect()
    }

    #[test]
    fn honest_pow_run_grows_and_agrees() {
        let cfg = pow(300, &[1.0, 1.0, 1.0], 0.1, 6);
        let tr = run_execution(&cfg).unwrap();
        assert!(tr.fault.is_none(), "{:?}", tr.fault);
        assert_eq!(tr.slots_run, 300);
        let blocks = tr.broadcasts.len();
        assert!((15..=60).contains(&blocks), "{blocks} blocks");
        let last: BTreeMap<_, _> = tr.confirmations.iter().map(|c| (c.processor, c.length)).collect();
        assert!(last.values().all(|&l| l > 5), "{last:?}");
    }

    #[test]
    fn honest_pos_run_grows() {
        let cfg = pos(300, &[1.0, 1.0, 2.0], 0.2, 4);
        let tr = run_execution(&cfg).unwrap();
        assert!(tr.fault.is_none(), "{:?}", tr.fault);
        assert!(tr.broadcasts.iter().all(|b| b.message.timestamp == Some(b.slot)));
        assert!(tr.broadcasts.len() > 30);
        let tips = final_tips(&tr);
        assert!(tips.values().all(|t| t.is_some()));
    }

    #[test]
    fn runs_are_reproducible_and_prefix_consistent() {
        let short = pow(150, &[1.0, 2.0], 0.2, 3);
        let long = Config { duration: 300, ..short.clone() };
        let a = run_execution(&short).unwrap();
        let b = run_execution(&short).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = run_execution(&long).unwrap();
        let prefix: Vec<_> = c.broadcasts.iter().filter(|x| x.slot <= 150).cloned().collect();
        assert_eq!(a.broadcasts, prefix);
    }

    type Config = ExecutionConfig;

    struct Forger;
    impl Behavior for Forger {
        fn step(&mut self, ctx: &mut StepCtx<'_>) -> Result<(), Fault> {
            let key = ctx.keys().next().unwrap();
            let b = ctx.create_block(key, crate::ledger::GENESIS, vec![1], None);
            ctx.broadcast(b)
        }
    }

    #[test]
    fn unpermitted_broadcast_aborts_the_run() {
        let cfg = pow(20, &[1.0, 1.0], 0.1, 1);
        let forger = |e: &ProcessorEntry| (e.id == ProcessorId(1)).then(|| Box::new(Forger) as Box<dyn Behavior>);
        let tr = run_with(&cfg, &forger).unwrap();
        let f = tr.fault.expect("fault");
        assert_eq!(f.slot, 1);
        assert_eq!(f.processor, Some(ProcessorId(1)));
        assert!(matches!(f.violation, Violation::Unpermitted { .. }));
        assert_eq!(tr.slots_run, 0);
    }

    #[test]
    fn adversaries_run_without_faults() {
        for strat in [
            AdversarySpec::PrivateFork { confirm_depth: 2, give_up_lag: 6 },
            AdversarySpec::SimulationAttacker { release_at: 150 },
        ] {
            let mut cfg = pow(200, &[1.0, 1.0], 0.2, 3);
            cfg.roster.push(ProcessorSpec::adversary(0.8, strat.clone()));
            cfg.pool.adversary_bound = AdversaryBound::Fraction { q: 0.3 };
            let tr = run_execution(&cfg).unwrap();
            assert!(tr.fault.is_none(), "{strat:?}: {:?}", tr.fault);
            assert!(tr.broadcasts.iter().any(|b| b.sender == ProcessorId(2)), "{strat:?}");

            let mut cfg = pos(200, &[1.0, 1.0], 0.3, 3);
            cfg.roster.push(ProcessorSpec::adversary(0.8, strat.clone()));
            cfg.pool.adversary_bound = AdversaryBound::Fraction { q: 0.3 };
            let tr = run_execution(&cfg).unwrap();
            assert!(tr.fault.is_none(), "{strat:?}: {:?}", tr.fault);
        }
    }

    #[test]
    fn adversary_over_its_bound_is_rejected() {
        let mut cfg = pow(10, &[1.0], 0.2, 3);
        cfg.roster.push(ProcessorSpec::adversary(1.0, AdversarySpec::Passive));
        cfg.pool.adversary_bound = AdversaryBound::Fraction { q: 0.3 };
        assert!(prepare(&cfg).is_err());
    }
}
