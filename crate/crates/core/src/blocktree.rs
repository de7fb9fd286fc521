//! Block structure over arbitrary message sets: ancestry, compatibility,
//! leaves, downward closure and chains.
//!
//! These functions work on plain message collections, so they apply to ledgers
//! read back from transcripts and to hand-built sets alike.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::types::{Message, MessageId};

/// Parent links for a collection of blocks. Genesis is always present.
#[derive(Debug, Clone)]
pub struct BlockTree {
    parent: HashMap<MessageId, Option<MessageId>>,
}

impl Default for BlockTree {
    fn default() -> Self {
        let mut parent = HashMap::new();
        parent.insert(MessageId::genesis(), None);
        Self { parent }
    }
}

impl BlockTree {
    pub fn from_messages<'a>(msgs: impl IntoIterator<Item = &'a Message>) -> Self {
        let mut t = Self::default();
        for m in msgs {
            t.add(m);
        }
        t
    }

    pub fn add(&mut self, m: &Message) {
        if m.is_block() {
            self.parent.insert(m.id, m.parent());
        }
    }

    pub fn contains(&self, id: &MessageId) -> bool {
        self.parent.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// The chain from genesis to `b`, inclusive.
    pub fn ancestors(&self, b: &MessageId) -> Result<Vec<MessageId>> {
        let mut out = Vec::new();
        let mut cur = *b;
        loop {
            let Some(p) = self.parent.get(&cur) else {
                return Err(Error::Dangling(*b));
            };
            out.push(cur);
            match p {
                Some(p) => cur = *p,
                None => break,
            }
            if out.len() > self.parent.len() {
                return Err(Error::Precondition(format!("cycle through {b:?}")));
            }
        }
        if cur != MessageId::genesis() {
            return Err(Error::Dangling(*b));
        }
        out.reverse();
        Ok(out)
    }

    pub fn is_ancestor_or_eq(&self, a: &MessageId, b: &MessageId) -> Result<bool> {
        self.ancestors(a)?;
        Ok(self.ancestors(b)?.contains(a))
    }

    pub fn compatible(&self, a: &MessageId, b: &MessageId) -> Result<bool> {
        if a == b {
            self.ancestors(a)?;
            return Ok(true);
        }
        let (ca, cb) = (self.ancestors(a)?, self.ancestors(b)?);
        Ok(ca.contains(b) || cb.contains(a))
    }

    /// Checks that every block descends from genesis without cycles, so the
    /// blocks form a single tree rooted at genesis.
    pub fn check_rooted_tree(&self) -> Result<()> {
        for id in self.parent.keys() {
            self.ancestors(id)?;
        }
        Ok(())
    }
}

fn blocks<'a>(set: &'a [&'a Message]) -> impl Iterator<Item = &'a Message> + 'a {
    set.iter().copied().filter(|m| m.is_block())
}

/// Blocks of `set` that are not the parent of any block in `set`.
pub fn leaves(set: &[&Message]) -> Vec<MessageId> {
    let parents: HashSet<MessageId> = blocks(set).filter_map(|m| m.parent()).collect();
    let mut out: Vec<MessageId> = blocks(set)
        .map(|m| m.id)
        .filter(|id| !parents.contains(id))
        .collect();
    out.sort();
    out.dedup();
    out
}

/// True when `set` contains the parent of each of its blocks.
pub fn downward_closed(set: &[&Message]) -> bool {
    let ids: HashSet<MessageId> = blocks(set).map(|m| m.id).collect();
    blocks(set).all(|m| m.parent().is_none_or(|p| ids.contains(&p)))
}

/// True when `set` is downward closed with exactly one leaf.
pub fn is_chain(set: &[&Message]) -> bool {
    downward_closed(set) && leaves(set).len() == 1
}
