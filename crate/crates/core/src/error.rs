use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{MessageId, ProcessorId, PublicKey, Slot};

/// A configuration that cannot be run. Reported before slot 1.
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Field { field: String, reason: String },
    #[error("setting axis `{axis}`: {reason}")]
    Axis { axis: String, reason: String },
}

impl ConfigError {
    pub fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Field {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn axis(axis: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Axis {
            axis: axis.into(),
            reason: reason.into(),
        }
    }
}

/// The clause of the broadcast, request or delivery rules that was broken.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "clause", rename_all = "snake_case")]
pub enum Violation {
    #[error("message {message:?} is not permitted for any key of the sender")]
    Unpermitted { message: MessageId },
    #[error("message {message:?} embeds {embedded:?}, which the sender never received")]
    ForgedEmbedding {
        message: MessageId,
        embedded: MessageId,
    },
    #[error("block {message:?} extends {parent:?}, which is not in the sender's message state")]
    ParentNotInState { message: MessageId, parent: MessageId },
    #[error("key {key} requested more than once in one slot")]
    RequestBudget { key: PublicKey },
    #[error("multi-permitter request for {key} carries extra data")]
    NonEmptyExtra { key: PublicKey },
    #[error("request for {key} names a message set outside the sender's state")]
    ForeignMessageSet { key: PublicKey },
    #[error("key {key} does not belong to the requesting processor")]
    ForeignKey { key: PublicKey },
    #[error("setting mismatch: {reason}")]
    SettingMismatch { reason: String },
    #[error("resource pool queried by a protocol in the unsized setting")]
    HiddenPool,
    #[error(
        "delivery of {message:?} from {sender} to {receiver} sent at {sent} \
         violates the synchrony bound (deadline {deadline}, delivered {delivered:?})"
    )]
    Schedule {
        message: MessageId,
        sender: ProcessorId,
        receiver: ProcessorId,
        sent: Slot,
        deadline: Slot,
        delivered: Option<Slot>,
    },
    #[error("{reason}")]
    Other { reason: String },
}

/// A run aborted by an illegal action. Names the offending processor and slot.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("fault at slot {slot}{}: {violation}", .processor.map(|p| format!(" by {p}")).unwrap_or_default())]
pub struct Fault {
    pub processor: Option<ProcessorId>,
    pub slot: Slot,
    pub violation: Violation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fault(#[from] Fault),
    #[error("block {0:?} has an ancestor missing from the ledger")]
    Dangling(MessageId),
    #[error("unknown message {0:?}")]
    UnknownMessage(MessageId),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("setting mismatch: {0}")]
    SettingMismatch(String),
    #[error("malformed transcript: {0}")]
    Transcript(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
