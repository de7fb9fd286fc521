//! Execution transcripts and their line-delimited JSON form.
//!
//! The file starts with a `header` record carrying the full configuration and
//! seed, then lists events slot by slot, and ends with an `end` record. Within
//! a slot the order is deliveries, grants, broadcasts, confirmations. Every
//! record is one JSON object with a `type` field:
//!
//! | type           | fields |
//! |----------------|--------|
//! | `header`       | `format_version`, `seed`, `config`, `processors` |
//! | `delivery`     | `slot`, `receiver`, `message`, `sender`, `sent_slot` |
//! | `grant`        | `slot`, `key`, `target_slot`?, `permit` (`form`: `exact` + `message`, or `timestamped` + `slot`) |
//! | `broadcast`    | `slot`, `sender`, `message` (full message object) |
//! | `confirmation` | `slot`, `processor`, `length`, `tip`?, `state_size` |
//! | `fault`        | `processor`?, `slot`, `violation` |
//! | `end`          | `slots_run` |

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::{ExecutionConfig, ProcessorEntry};
use crate::error::{Error, Fault, Result};
use crate::permitter::PermitRecord;
use crate::types::{Message, MessageId, ProcessorId, PublicKey, Slot};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub seed: u64,
    pub config: ExecutionConfig,
    pub processors: Vec<ProcessorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BroadcastRecord {
    pub slot: Slot,
    pub sender: ProcessorId,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub slot: Slot,
    pub receiver: ProcessorId,
    pub message: MessageId,
    pub sender: ProcessorId,
    pub sent_slot: Slot,
}

/// A permission set arriving at `slot` in answer to a request for `key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantRecord {
    pub slot: Slot,
    pub key: PublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_slot: Option<Slot>,
    pub permit: PermitRecord,
}

/// A processor's confirmed chain after its step at `slot`. Emitted at slot 1
/// and whenever length, tip or state size changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmationRecord {
    pub slot: Slot,
    pub processor: ProcessorId,
    pub length: u32,
    /// Leaf of the confirmed chain; absent for the empty chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip: Option<MessageId>,
    pub state_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: Header,
    pub broadcasts: Vec<BroadcastRecord>,
    pub deliveries: Vec<DeliveryRecord>,
    pub grants: Vec<GrantRecord>,
    pub confirmations: Vec<ConfirmationRecord>,
    pub fault: Option<Fault>,
    /// Last fully executed slot.
    pub slots_run: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Header(Header),
    Delivery(DeliveryRecord),
    Grant(GrantRecord),
    Broadcast(BroadcastRecord),
    Confirmation(ConfirmationRecord),
    Fault(Fault),
    End { slots_run: Slot },
}

impl Transcript {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            broadcasts: Vec::new(),
            deliveries: Vec::new(),
            grants: Vec::new(),
            confirmations: Vec::new(),
            fault: None,
            slots_run: 0,
        }
    }

    pub fn config(&self) -> &ExecutionConfig {
        &self.header.config
    }

    /// The honest processors (the analysis population).
    pub fn honest(&self) -> Vec<ProcessorId> {
        self.header
            .processors
            .iter()
            .filter(|p| p.adversary.is_none())
            .map(|p| p.id)
            .collect()
    }

    pub fn adversary(&self) -> Option<ProcessorId> {
        self.header
            .processors
            .iter()
            .find(|p| p.adversary.is_some())
            .map(|p| p.id)
    }

    /// Events in file order.
    pub fn events(&self) -> Vec<Event> {
        let mut out = Vec::with_capacity(
            2 + self.broadcasts.len()
                + self.deliveries.len()
                + self.grants.len()
                + self.confirmations.len(),
        );
        out.push(Event::Header(self.header.clone()));
        let (mut d, mut g, mut b, mut c) = (0, 0, 0, 0);
        let last = [
            self.deliveries.last().map(|x| x.slot),
            self.grants.last().map(|x| x.slot),
            self.broadcasts.last().map(|x| x.slot),
            self.confirmations.last().map(|x| x.slot),
        ]
        .into_iter()
        .flatten()
        .max()
        .unwrap_or(0);
        for t in 1..=last {
            while d < self.deliveries.len() && self.deliveries[d].slot == t {
                out.push(Event::Delivery(self.deliveries[d].clone()));
                d += 1;
            }
            while g < self.grants.len() && self.grants[g].slot == t {
                out.push(Event::Grant(self.grants[g].clone()));
                g += 1;
            }
            while b < self.broadcasts.len() && self.broadcasts[b].slot == t {
                out.push(Event::Broadcast(self.broadcasts[b].clone()));
                b += 1;
            }
            while c < self.confirmations.len() && self.confirmations[c].slot == t {
                out.push(Event::Confirmation(self.confirmations[c].clone()));
                c += 1;
            }
        }
        if let Some(f) = &self.fault {
            out.push(Event::Fault(f.clone()));
        }
        out.push(Event::End {
            slots_run: self.slots_run,
        });
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in self.events() {
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Transcript("empty file".into()))??;
        let Event::Header(header) = serde_json::from_str(&first)? else {
            return Err(Error::Transcript("first record is not a header".into()));
        };
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Transcript(format!(
                "format version {} not supported",
                header.format_version
            )));
        }
        let mut tr = Transcript::new(header);
        let mut ended = false;
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if ended {
                return Err(Error::Transcript(format!("record after end at line {}", n + 2)));
            }
            match serde_json::from_str(&line)? {
                Event::Header(_) => {
                    return Err(Error::Transcript(format!("second header at line {}", n + 2)))
                }
                Event::Delivery(x) => tr.deliveries.push(x),
                Event::Grant(x) => tr.grants.push(x),
                Event::Broadcast(x) => tr.broadcasts.push(x),
                Event::Confirmation(x) => tr.confirmations.push(x),
                Event::Fault(f) => tr.fault = Some(f),
                Event::End { slots_run } => {
                    tr.slots_run = slots_run;
                    ended = true;
                }
            }
        }
        if !ended {
            return Err(Error::Transcript("missing end record".into()));
        }
        Ok(tr)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        Self::read_jsonl(s.as_bytes())
    }
}
