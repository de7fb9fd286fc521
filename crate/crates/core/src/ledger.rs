//! The message arena of an execution and per-processor message states.
//!
//! Every message materialized during a run (broadcast or still private) gets a
//! dense index in the [`Ledger`]. Blocks carry their parent index, height and a
//! skip pointer so ancestor queries are logarithmic in chain length.

use std::collections::{HashMap, HashSet};

use crate::types::{Message, MessageId, ProcessorId, Slot};

pub type Idx = u32;

pub const GENESIS: Idx = 0;

#[derive(Debug, Clone)]
pub struct Entry {
    pub msg: Message,
    pub parent: Option<Idx>,
    /// Blocks beyond genesis on the path to this block. Genesis has height 0.
    pub height: u32,
    skip: Idx,
    /// Largest timestamp on the path from genesis to this block.
    pub max_ts: Slot,
    pub broadcast_at: Option<Slot>,
    pub broadcaster: Option<ProcessorId>,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    entries: Vec<Entry>,
    index: HashMap<MessageId, Idx>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

fn invert_lowest_one(n: u32) -> u32 {
    n & n.wrapping_sub(1)
}

fn skip_height(h: u32) -> u32 {
    if h < 2 {
        0
    } else if h & 1 == 1 {
        invert_lowest_one(invert_lowest_one(h - 1)) + 1
    } else {
        invert_lowest_one(h)
    }
}

impl Ledger {
    pub fn new() -> Self {
        let g = Message::genesis();
        let mut index = HashMap::new();
        index.insert(g.id, GENESIS);
        Self {
            entries: vec![Entry {
                msg: g,
                parent: None,
                height: 0,
                skip: GENESIS,
                max_ts: 0,
                broadcast_at: Some(0),
                broadcaster: None,
            }],
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, id: &MessageId) -> Option<Idx> {
        self.index.get(id).copied()
    }

    pub fn entry(&self, idx: Idx) -> &Entry {
        &self.entries[idx as usize]
    }

    pub fn msg(&self, idx: Idx) -> &Message {
        &self.entries[idx as usize].msg
    }

    pub fn id(&self, idx: Idx) -> MessageId {
        self.entries[idx as usize].msg.id
    }

    pub fn height(&self, idx: Idx) -> u32 {
        self.entries[idx as usize].height
    }

    pub fn parent(&self, idx: Idx) -> Option<Idx> {
        self.entries[idx as usize].parent
    }

    pub fn is_block(&self, idx: Idx) -> bool {
        self.entries[idx as usize].msg.is_block()
    }

    pub fn entries(&self) -> impl Iterator<Item = (Idx, &Entry)> {
        self.entries.iter().enumerate().map(|(i, e)| (i as Idx, e))
    }

    /// Adds a message, returning its index. Re-inserting a known message is a
    /// no-op. Returns `None` when a block's parent is not in the ledger.
    pub fn insert(&mut self, msg: Message) -> Option<Idx> {
        if let Some(&i) = self.index.get(&msg.id) {
            return Some(i);
        }
        let idx = self.entries.len() as Idx;
        let own_ts = msg.timestamp.unwrap_or(0);
        let entry = match msg.parent() {
            Some(pid) => {
                let parent = *self.index.get(&pid)?;
                if !self.is_block(parent) {
                    return None;
                }
                let height = self.height(parent) + 1;
                let skip = self.ancestor_at(parent, skip_height(height));
                Entry {
                    parent: Some(parent),
                    height,
                    skip,
                    max_ts: self.entries[parent as usize].max_ts.max(own_ts),
                    msg,
                    broadcast_at: None,
                    broadcaster: None,
                }
            }
            None => Entry {
                parent: None,
                height: 0,
                skip: idx,
                max_ts: own_ts,
                msg,
                broadcast_at: None,
                broadcaster: None,
            },
        };
        self.index.insert(entry.msg.id, idx);
        self.entries.push(entry);
        Some(idx)
    }

    /// Records the first broadcast of a message.
    pub fn mark_broadcast(&mut self, idx: Idx, slot: Slot, by: ProcessorId) {
        let e = &mut self.entries[idx as usize];
        if e.broadcast_at.is_none() {
            e.broadcast_at = Some(slot);
            e.broadcaster = Some(by);
        }
    }

    /// The ancestor of `idx` at height `h` (or `idx` itself when `h` equals its height).
    ///
    /// Panics if `h` exceeds the height of `idx`.
    pub fn ancestor_at(&self, idx: Idx, h: u32) -> Idx {
        let mut walk = idx;
        let mut hw = self.height(walk);
        assert!(h <= hw, "ancestor height {h} above block height {hw}");
        while hw > h {
            let hs = skip_height(hw);
            let hsp = skip_height(hw - 1);
            let e = &self.entries[walk as usize];
            if hs == h || (hs > h && !(hsp < hs.saturating_sub(2) && hsp >= h)) {
                walk = e.skip;
                hw = hs;
            } else {
                walk = e.parent.expect("non-genesis block has a parent");
                hw -= 1;
            }
        }
        walk
    }

    pub fn is_ancestor_or_eq(&self, a: Idx, b: Idx) -> bool {
        let ha = self.height(a);
        ha <= self.height(b) && self.ancestor_at(b, ha) == a
    }

    /// Blocks are compatible when equal or one is an ancestor of the other.
    pub fn compatible(&self, a: Idx, b: Idx) -> bool {
        self.is_ancestor_or_eq(a, b) || self.is_ancestor_or_eq(b, a)
    }

    /// Genesis-to-`idx` path.
    pub fn chain(&self, idx: Idx) -> Vec<Idx> {
        let mut out = Vec::with_capacity(self.height(idx) as usize + 1);
        let mut cur = Some(idx);
        while let Some(c) = cur {
            out.push(c);
            cur = self.parent(c);
        }
        out.reverse();
        out
    }

    /// Total order used for every fork-choice tie: higher first, then smaller id.
    pub fn better_tip(&self, a: Idx, b: Idx) -> bool {
        let (ha, hb) = (self.height(a), self.height(b));
        ha > hb || (ha == hb && self.id(a) < self.id(b))
    }
}

#[derive(Debug, Clone, Default)]
struct Bits(Vec<u64>);

impl Bits {
    fn get(&self, i: Idx) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        self.0.get(w).is_some_and(|x| x >> b & 1 == 1)
    }

    fn set(&mut self, i: Idx) {
        let (w, b) = ((i / 64) as usize, i % 64);
        if w >= self.0.len() {
            self.0.resize(w + 1, 0);
        }
        self.0[w] |= 1 << b;
    }
}

/// A processor's message state: everything it has received or broadcast.
///
/// A block is *rooted* once all of its ancestors are also in the state; only
/// rooted blocks take part in fork choice.
#[derive(Debug, Clone)]
pub struct View {
    known: Bits,
    rooted: Bits,
    orphans: HashMap<Idx, Vec<Idx>>,
    contained: HashSet<MessageId>,
    best: Idx,
    size: usize,
    newly_rooted: Vec<Idx>,
}

impl Default for View {
    fn default() -> Self {
        Self::new()
    }
}

impl View {
    pub fn new() -> Self {
        let mut known = Bits::default();
        known.set(GENESIS);
        Self {
            rooted: known.clone(),
            known,
            orphans: HashMap::new(),
            contained: HashSet::new(),
            best: GENESIS,
            size: 1,
            newly_rooted: Vec::new(),
        }
    }

    /// Adds a message. Returns false if it was already present.
    pub fn insert(&mut self, ledger: &Ledger, idx: Idx) -> bool {
        if self.known.get(idx) {
            return false;
        }
        self.known.set(idx);
        self.size += 1;
        let e = ledger.entry(idx);
        self.contained.extend(e.msg.embedded.iter().copied());
        match e.parent {
            None => {
                if e.msg.is_block() {
                    self.root(ledger, idx);
                }
            }
            Some(p) if self.rooted.get(p) => self.root(ledger, idx),
            Some(p) => self.orphans.entry(p).or_default().push(idx),
        }
        true
    }

    fn root(&mut self, ledger: &Ledger, idx: Idx) {
        let mut stack = vec![idx];
        while let Some(b) = stack.pop() {
            self.rooted.set(b);
            self.newly_rooted.push(b);
            if ledger.better_tip(b, self.best) {
                self.best = b;
            }
            if let Some(children) = self.orphans.remove(&b) {
                stack.extend(children);
            }
        }
    }

    pub fn knows(&self, idx: Idx) -> bool {
        self.known.get(idx)
    }

    pub fn is_rooted(&self, idx: Idx) -> bool {
        self.rooted.get(idx)
    }

    /// True if the signed pair `id` appears in the state, directly or embedded.
    pub fn contains_signed(&self, ledger: &Ledger, id: &MessageId) -> bool {
        ledger.get(id).is_some_and(|i| self.known.get(i)) || self.contained.contains(id)
    }

    /// Tip of the longest rooted chain, ties broken by smallest id.
    pub fn best_tip(&self) -> Idx {
        self.best
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Blocks rooted since the last call, in rooting order.
    pub fn take_newly_rooted(&mut self) -> Vec<Idx> {
        std::mem::take(&mut self.newly_rooted)
    }

    pub fn known_indices(&self, ledger: &Ledger) -> Vec<Idx> {
        (0..ledger.len() as Idx).filter(|&i| self.known.get(i)).collect()
    }
}
