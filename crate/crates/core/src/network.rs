//! Synchrony schedules and timing rules.
//!
//! A timing rule decides, for each broadcast and each other processor, the
//! slot at which the message is received (or that it never is). Rules are
//! checked against the synchrony bound: a message broadcast at `t₁` must reach
//! everyone by `t₂ + Δ` for the first synchronous window `[t₂, t₂ + Δ]` with
//! `t₂ ≥ t₁`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::Synchrony;
use crate::error::{ConfigError, Violation};
use crate::rng::{SeedTree, Stream};
use crate::transcript::Transcript;
use crate::types::{MessageId, ProcessorId, Slot};

/// Asynchronous intervals, inclusive; every other slot is synchronous.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub async_intervals: Vec<[Slot; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynchronySchedule {
    duration: Slot,
    delta: Slot,
    /// Index `t` for slot `t`; index 0 unused.
    sync: Vec<bool>,
    /// Earliest `t₂ ≥ t` opening a fully synchronous window, if any.
    next_window: Vec<Option<Slot>>,
}

impl SynchronySchedule {
    pub fn new(spec: &ScheduleSpec, duration: Slot, delta: Slot) -> Result<Self, ConfigError> {
        let mut sync = vec![true; duration as usize + 1];
        for &[a, b] in &spec.async_intervals {
            if a < 1 || b < a || b > duration {
                return Err(ConfigError::field(
                    "schedule.async_intervals",
                    format!("[{a}, {b}] is not a sub-interval of [1, {duration}]"),
                ));
            }
            for t in a..=b {
                sync[t as usize] = false;
            }
        }
        Ok(Self::from_labels(sync, delta))
    }

    pub fn all_async(duration: Slot, delta: Slot) -> Self {
        Self::from_labels(vec![false; duration as usize + 1], delta)
    }

    fn from_labels(sync: Vec<bool>, delta: Slot) -> Self {
        let duration = sync.len() as Slot - 1;
        // run[t]: synchronous slots starting at t.
        let mut run = vec![0u64; sync.len() + 1];
        for t in (1..=duration).rev() {
            run[t as usize] = if sync[t as usize] { run[t as usize + 1] + 1 } else { 0 };
        }
        let mut next_window = vec![None; sync.len() + 1];
        for t in (1..=duration).rev() {
            next_window[t as usize] = if run[t as usize] > delta {
                Some(t)
            } else {
                next_window[t as usize + 1]
            };
        }
        Self {
            duration,
            delta,
            sync,
            next_window,
        }
    }

    pub fn duration(&self) -> Slot {
        self.duration
    }

    pub fn is_sync(&self, t: Slot) -> bool {
        t >= 1 && t <= self.duration && self.sync[t as usize]
    }

    pub fn all_sync(&self) -> bool {
        self.sync[1..].iter().all(|&s| s)
    }

    pub fn all_async_labels(&self) -> bool {
        self.sync[1..].iter().all(|&s| !s)
    }

    /// Latest slot by which a message broadcast at `sent` must be everywhere.
    pub fn delivery_deadline(&self, sent: Slot) -> Option<Slot> {
        if sent < 1 || sent > self.duration {
            return None;
        }
        self.next_window[sent as usize].map(|t2| t2 + self.delta)
    }

    /// Maximal synchronous runs `[a, b]`.
    pub fn sync_segments(&self) -> Vec<(Slot, Slot)> {
        let mut out = Vec::new();
        let mut start = None;
        for t in 1..=self.duration {
            match (self.sync[t as usize], start) {
                (true, None) => start = Some(t),
                (false, Some(a)) => {
                    out.push((a, t - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(a) = start {
            out.push((a, self.duration));
        }
        out
    }
}

fn boxed_default() -> Box<TimingPolicy> {
    Box::default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub sender: ProcessorId,
    pub receiver: ProcessorId,
    pub sent: Slot,
    /// `None` means never delivered.
    pub deliver_at: Option<Slot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimingPolicy {
    /// Every message arrives exactly `delay` slots later.
    UniformDelay { delay: Slot },
    /// Each (sender, receiver, message) edge draws a delay uniform on
    /// `1..=max_delay` (default `Δ`).
    RandomDelay {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_delay: Option<Slot>,
    },
    /// Groups of processors (the unlisted ones form one more group) hear
    /// nothing from each other during `[from, to]`; held messages arrive at
    /// `to + 1`, or never if `to` is the last slot.
    Partition {
        groups: Vec<Vec<ProcessorId>>,
        from: Slot,
        to: Slot,
        #[serde(default = "boxed_default")]
        base: Box<TimingPolicy>,
    },
    /// Explicit per-(sender, receiver, send slot) decisions over a fallback.
    Table {
        entries: Vec<TableEntry>,
        #[serde(default = "boxed_default")]
        fallback: Box<TimingPolicy>,
    },
    /// The listed processors receive nothing except, at `release_at`, the
    /// messages in their feed (`feeds[i]` goes to `processors[i]`).
    Isolate {
        processors: Vec<ProcessorId>,
        release_at: Slot,
        feeds: Vec<Vec<MessageId>>,
        #[serde(default = "boxed_default")]
        base: Box<TimingPolicy>,
    },
}

impl Default for TimingPolicy {
    fn default() -> Self {
        Self::RandomDelay { max_delay: None }
    }
}

impl TimingPolicy {
    /// Processors that must hold zero balance under this policy.
    pub fn isolated(&self) -> Vec<ProcessorId> {
        match self {
            Self::Isolate {
                processors, base, ..
            } => {
                let mut v = processors.clone();
                v.extend(base.isolated());
                v
            }
            Self::Partition { base, .. } => base.isolated(),
            Self::Table { fallback, .. } => fallback.isolated(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
enum Rule {
    Uniform(Slot),
    Random(Slot),
    Partition {
        group: HashMap<ProcessorId, usize>,
        from: Slot,
        to: Slot,
        base: Box<Rule>,
    },
    Table {
        entries: HashMap<(ProcessorId, ProcessorId, Slot), Option<Slot>>,
        fallback: Box<Rule>,
    },
    Isolate {
        feeds: HashMap<ProcessorId, HashSet<MessageId>>,
        release_at: Slot,
        base: Box<Rule>,
    },
}

/// A concrete timing rule for one execution.
#[derive(Debug, Clone)]
pub struct TimingRule {
    rule: Rule,
    seeds: SeedTree,
    duration: Slot,
}

fn compile(
    policy: &TimingPolicy,
    schedule: &SynchronySchedule,
    synchrony: Synchrony,
    delta: Slot,
    roster: &[ProcessorId],
) -> Result<Rule, ConfigError> {
    let bound_check = |d: Slot, field: &str| {
        if d < 1 {
            return Err(ConfigError::field(field, "delays must be >= 1"));
        }
        if d > delta && !schedule.all_async_labels() {
            return Err(ConfigError::field(
                field,
                format!("delay {d} exceeds Δ = {delta} while synchronous slots exist"),
            ));
        }
        Ok(())
    };
    Ok(match policy {
        TimingPolicy::UniformDelay { delay } => {
            bound_check(*delay, "timing.delay")?;
            Rule::Uniform(*delay)
        }
        TimingPolicy::RandomDelay { max_delay } => {
            let d = max_delay.unwrap_or(delta);
            bound_check(d, "timing.max_delay")?;
            Rule::Random(d)
        }
        TimingPolicy::Partition {
            groups,
            from,
            to,
            base,
        } => {
            if synchrony == Synchrony::Synchronous {
                return Err(ConfigError::axis(
                    "synchrony",
                    "a partition needs asynchronous slots, which the synchronous setting lacks",
                ));
            }
            if *from < 1 || to < from || *to > schedule.duration() {
                return Err(ConfigError::field("timing.from", "bad partition interval"));
            }
            if let Some(t) = (*from..=*to).find(|&t| schedule.is_sync(t)) {
                return Err(ConfigError::field(
                    "timing",
                    format!("partition interval includes synchronous slot {t}"),
                ));
            }
            let mut group = HashMap::new();
            for (g, members) in groups.iter().enumerate() {
                for p in members {
                    if !roster.contains(p) {
                        return Err(ConfigError::field(
                            "timing.groups",
                            format!("{p} is not in the roster"),
                        ));
                    }
                    if group.insert(*p, g).is_some() {
                        return Err(ConfigError::field(
                            "timing.groups",
                            format!("{p} appears in two groups"),
                        ));
                    }
                }
            }
            Rule::Partition {
                group,
                from: *from,
                to: *to,
                base: Box::new(compile(base, schedule, synchrony, delta, roster)?),
            }
        }
        TimingPolicy::Table { entries, fallback } => {
            let mut map = HashMap::new();
            for e in entries {
                if let Some(d) = e.deliver_at {
                    if d <= e.sent {
                        return Err(ConfigError::field(
                            "timing.entries",
                            "delivery must come after the send slot",
                        ));
                    }
                }
                map.insert((e.sender, e.receiver, e.sent), e.deliver_at);
            }
            Rule::Table {
                entries: map,
                fallback: Box::new(compile(fallback, schedule, synchrony, delta, roster)?),
            }
        }
        TimingPolicy::Isolate {
            processors,
            release_at,
            feeds,
            base,
        } => {
            if !schedule.all_async_labels() {
                return Err(ConfigError::field(
                    "schedule",
                    "isolating processors needs every slot asynchronous",
                ));
            }
            if synchrony == Synchrony::Synchronous {
                return Err(ConfigError::axis(
                    "synchrony",
                    "isolation needs the partially synchronous setting",
                ));
            }
            if feeds.len() > processors.len() {
                return Err(ConfigError::field("timing.feeds", "more feeds than processors"));
            }
            let mut map = HashMap::new();
            for (i, p) in processors.iter().enumerate() {
                if !roster.contains(p) {
                    return Err(ConfigError::field(
                        "timing.processors",
                        format!("{p} is not in the roster"),
                    ));
                }
                let feed: HashSet<MessageId> =
                    feeds.get(i).map(|f| f.iter().copied().collect()).unwrap_or_default();
                map.insert(*p, feed);
            }
            Rule::Isolate {
                feeds: map,
                release_at: *release_at,
                base: Box::new(compile(base, schedule, synchrony, delta, roster)?),
            }
        }
    })
}

/// Builds the concrete rule, rejecting policies that contradict the schedule.
pub fn build_timing_rule(
    policy: &TimingPolicy,
    schedule: &SynchronySchedule,
    synchrony: Synchrony,
    delta: Slot,
    roster: &[ProcessorId],
    seed: u64,
) -> Result<TimingRule, ConfigError> {
    Ok(TimingRule {
        rule: compile(policy, schedule, synchrony, delta, roster)?,
        seeds: SeedTree::new(seed),
        duration: schedule.duration(),
    })
}

impl TimingRule {
    /// `T(sender, receiver, m, sent)`: the delivery slot, or `None` if the
    /// message never arrives. Slots past the duration count as never.
    pub fn delivery(
        &self,
        sender: ProcessorId,
        receiver: ProcessorId,
        msg: MessageId,
        sent: Slot,
    ) -> Option<Slot> {
        self.eval(&self.rule, sender, receiver, msg, sent)
            .filter(|&d| d <= self.duration)
    }

    fn eval(
        &self,
        rule: &Rule,
        sender: ProcessorId,
        receiver: ProcessorId,
        msg: MessageId,
        sent: Slot,
    ) -> Option<Slot> {
        match rule {
            Rule::Uniform(d) => Some(sent + d),
            Rule::Random(max) => Some(
                sent + self
                    .seeds
                    .uniform_int(Stream::Delay(sender, receiver, msg, sent), 1, *max),
            ),
            Rule::Partition {
                group,
                from,
                to,
                base,
            } => {
                let d = self.eval(base, sender, receiver, msg, sent)?;
                let gs = group.get(&sender).copied().unwrap_or(usize::MAX);
                let gr = group.get(&receiver).copied().unwrap_or(usize::MAX);
                if gs == gr || d < *from || sent > *to {
                    Some(d)
                } else {
                    Some(d.max(to + 1))
                }
            }
            Rule::Table { entries, fallback } => match entries.get(&(sender, receiver, sent)) {
                Some(&d) => d,
                None => self.eval(fallback, sender, receiver, msg, sent),
            },
            Rule::Isolate {
                feeds,
                release_at,
                base,
            } => match feeds.get(&receiver) {
                Some(feed) => (sent < *release_at && feed.contains(&msg)).then_some(*release_at),
                None => self.eval(base, sender, receiver, msg, sent),
            },
        }
    }

    /// Delivery slot for one edge, checked against the synchrony bound.
    pub fn checked_delivery(
        &self,
        schedule: &SynchronySchedule,
        sender: ProcessorId,
        receiver: ProcessorId,
        msg: MessageId,
        sent: Slot,
    ) -> Result<Option<Slot>, Violation> {
        let d = self.delivery(sender, receiver, msg, sent);
        if let Some(dl) = schedule.delivery_deadline(sent) {
            if d.is_none_or(|d| d > dl) {
                return Err(Violation::Schedule {
                    message: msg,
                    sender,
                    receiver,
                    sent,
                    deadline: dl,
                    delivered: d,
                });
            }
        }
        Ok(d)
    }
}

/// All deliveries at `slot` for broadcasts in `pending` (sender, message,
/// send slot), per receiver. Fails on the first synchrony-bound violation.
pub fn deliveries_at(
    slot: Slot,
    rule: &TimingRule,
    schedule: &SynchronySchedule,
    roster: &[ProcessorId],
    pending: &[(ProcessorId, MessageId, Slot)],
) -> Result<BTreeMap<ProcessorId, Vec<MessageId>>, Violation> {
    let mut out: BTreeMap<ProcessorId, Vec<MessageId>> = BTreeMap::new();
    for &(sender, msg, sent) in pending {
        for &r in roster {
            if r == sender {
                continue;
            }
            if rule.checked_delivery(schedule, sender, r, msg, sent)? == Some(slot) {
                out.entry(r).or_default().push(msg);
            }
        }
    }
    Ok(out)
}

/// A broadcast that did not reach some processor in time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaViolation {
    pub message: MessageId,
    pub sender: ProcessorId,
    pub receiver: ProcessorId,
    pub sent: Slot,
    pub deadline: Slot,
    pub held_at: Option<Slot>,
}

/// Checks the synchrony bound over a finished transcript: every other
/// processor must hold each broadcast message by its deadline.
pub fn check_delta_conformance(tr: &Transcript) -> Result<Vec<DeltaViolation>, ConfigError> {
    let cfg = &tr.header.config;
    let schedule = SynchronySchedule::new(&cfg.schedule, cfg.duration, cfg.delta)?;
    let schedule = if matches!(cfg.timing, TimingPolicy::Isolate { .. }) {
        SynchronySchedule::all_async(cfg.duration, cfg.delta).max_labels(schedule)
    } else {
        schedule
    };
    let ids: Vec<ProcessorId> = tr.header.processors.iter().map(|p| p.id).collect();
    let mut held: HashMap<(ProcessorId, MessageId), Slot> = HashMap::new();
    let mut hold = |p: ProcessorId, m: MessageId, t: Slot| {
        held.entry((p, m)).and_modify(|x| *x = (*x).min(t)).or_insert(t);
    };
    for d in &tr.deliveries {
        hold(d.receiver, d.message, d.slot);
    }
    for b in &tr.broadcasts {
        hold(b.sender, b.message.id, b.slot);
    }
    let mut out = Vec::new();
    for b in &tr.broadcasts {
        let Some(dl) = schedule.delivery_deadline(b.slot) else {
            continue;
        };
        if dl > tr.slots_run {
            continue;
        }
        for &r in &ids {
            if r == b.sender {
                continue;
            }
            let at = held.get(&(r, b.message.id)).copied();
            if at.is_none_or(|a| a > dl) {
                out.push(DeltaViolation {
                    message: b.message.id,
                    sender: b.sender,
                    receiver: r,
                    sent: b.slot,
                    deadline: dl,
                    held_at: at,
                });
            }
        }
    }
    Ok(out)
}

impl SynchronySchedule {
    // Isolation configs are validated against an all-asynchronous schedule;
    // keep whichever labelling is less demanding.
    fn max_labels(self, other: SynchronySchedule) -> SynchronySchedule {
        if other.all_async_labels() {
            other
        } else {
            self
        }
    }
}
