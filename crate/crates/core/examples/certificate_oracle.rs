//! The structured certificate search against brute force over every subset
//! of a small ledger.
//!
//!     cargo run --example certificate_oracle

use permsim::analysis::certificates::certificate_violation;
use permsim::analysis::exhaustive_violation;
use permsim::protocols::Rule;
use permsim::{Message, MessageId, ProcessorId, PublicKey};

fn arm(len: u8, tag: u8) -> Vec<Message> {
    let key = PublicKey::new(ProcessorId(0), 0);
    let mut parent = MessageId::genesis();
    (0..len)
        .map(|i| {
            let m = Message::block(key, parent, vec![tag, i], None);
            parent = m.id;
            m
        })
        .collect()
}

fn main() -> permsim::Result<()> {
    // Two arms of 6 and 5 blocks off genesis.
    let msgs: Vec<Message> = arm(6, 1).into_iter().chain(arm(5, 2)).collect();
    let set: Vec<&Message> = msgs.iter().collect();
    for k in 0..7 {
        let rule = Rule::KDeep(k);
        let fast = certificate_violation(&set, &rule, 1);
        let slow = exhaustive_violation(&set, &rule)?;
        println!("k = {k}: structured {}, exhaustive {slow}", fast.is_some());
        assert_eq!(fast.is_some(), slow);
    }
    Ok(())
}
