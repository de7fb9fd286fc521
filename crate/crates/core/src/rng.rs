//! Keyed random substreams derived from one root seed.
//!
//! Every random choice in an execution is addressed by a [`Stream`] tag rather
//! than drawn from a shared sequential generator. Two executions that share a
//! root seed therefore agree on every stream they both touch, regardless of how
//! many processors, requests or messages the other execution has.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::types::{MessageId, ProcessorId, PublicKey, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Private randomness handed to a processor's state machine at a slot.
    Processor(ProcessorId, Slot),
    /// Proof-of-work lottery for one key at one request slot.
    PowGrant(PublicKey, Slot),
    /// Proof-of-stake leader draw for a target slot; shared by all keys.
    PosLeader(Slot),
    /// Per-edge message delay.
    Delay(ProcessorId, ProcessorId, MessageId, Slot),
    /// Hidden resource-pool sampling.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// The 64-bit seed of a stream.
    pub fn seed(&self, stream: Stream) -> u64 {
        let mut acc = splitmix(self.root);
        let mut fold = |x: u64| acc = splitmix(acc ^ x);
        match stream {
            Stream::Processor(p, t) => {
                fold(1);
                fold(p.0 as u64);
                fold(t);
            }
            Stream::PowGrant(k, t) => {
                fold(2);
                fold(k.owner.0 as u64);
                fold(k.index as u64);
                fold(t);
            }
            Stream::PosLeader(t) => {
                fold(3);
                fold(t);
            }
            Stream::Delay(a, b, m, t) => {
                fold(4);
                fold(a.0 as u64);
                fold(b.0 as u64);
                fold(m.prefix_u64());
                fold(t);
            }
            Stream::Pool => fold(5),
        }
        acc
    }

    /// A full generator for the stream.
    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream))
    }

    /// One uniform draw in `[0, 1)` from the stream.
    pub fn uniform(&self, stream: Stream) -> f64 {
        (self.seed(stream) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One uniform integer in `lo..=hi`.
    pub fn uniform_int(&self, stream: Stream, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        lo + ((self.seed(stream) as u128 * span as u128) >> 64) as u64
    }
}
