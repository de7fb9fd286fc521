//! Deterministic timeslot simulation of permissionless blockchain protocols.
//!
//! Processors take turns once per slot: they receive messages routed by a
//! timing rule and permission sets from a permitter oracle, broadcast what
//! they are permitted to, and file new requests. Every random choice comes from
//! a keyed substream of one seed, so an execution is a pure function of its
//! configuration.
//!
//! The crate provides the engine ([`engine`]), block-lottery and slot-leader
//! permitters ([`permitter`]) over resource pools ([`pool`]), timing rules
//! ([`network`]), reference longest-chain protocols and confirmation rules
//! ([`protocols`]), adversarial strategies ([`adversary`]), transcript
//! analysis ([`analysis`]) and a batch experiment runner ([`experiment`]).

pub mod adversary;
pub mod analysis;
pub mod blocktree;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod ledger;
pub mod network;
pub mod permitter;
pub mod pool;
pub mod protocols;
pub mod rng;
pub mod transcript;
pub mod types;

pub use config::ExecutionConfig;
pub use engine::{prepare, run_execution};
pub use error::{ConfigError, Error, Fault, Result, Violation};
pub use transcript::Transcript;
pub use types::{Message, MessageId, ProcessorId, PublicKey, Slot};
