//! Identifiers and the signed message type shared by every module.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// A timeslot of the simulated real-time clock. Executions run slots `1..=duration`;
/// slot 0 is reserved for the genesis block.
pub type Slot = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessorId(pub u32);

impl fmt::Display for ProcessorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A public key. Keys are scoped by their owning processor, so two processors can
/// never share one; each processor mints `index = 0, 1, 2, ...` on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PublicKey {
    pub owner: ProcessorId,
    pub index: u32,
}

impl PublicKey {
    pub fn new(owner: ProcessorId, index: u32) -> Self {
        Self { owner, index }
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/k{}", self.owner, self.index)
    }
}

/// Content digest of a message. Collisions are assumed not to happen.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageId([u8; 32]);

static GENESIS_ID: LazyLock<MessageId> = LazyLock::new(|| {
    let digest = Sha256::digest(b"permsim/genesis");
    MessageId(digest.into())
});

impl MessageId {
    pub fn genesis() -> Self {
        *GENESIS_ID
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight bytes as an integer; used to fold ids into seed derivations.
    pub fn prefix_u64(&self) -> u64 {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&self.0[..8]);
        u64::from_le_bytes(buf)
    }
}

impl fmt::Debug for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", &self.to_hex()[..10])
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid message id `{0}`")]
pub struct ParseIdError(String);

impl FromStr for MessageId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|_| ParseIdError(s.to_string()))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| ParseIdError(s.to_string()))?;
        Ok(Self(arr))
    }
}

impl Serialize for MessageId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for MessageId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MessageKind {
    Genesis,
    Block { parent: MessageId },
    Note,
}

/// A message `(U, σ)`: content `σ` signed by `signer`.
///
/// `embedded` lists signed messages contained in the content. Blocks name their
/// parent by digest; the parent is not an embedded signature. The id is derived
/// from every other field, so construct messages through [`Message::block`] or
/// [`Message::note`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub signer: PublicKey,
    #[serde(flatten)]
    pub kind: MessageKind,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embedded: Vec<MessageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<Slot>,
}

impl Message {
    /// The genesis block. Its signer is a sentinel key owned by no processor.
    pub fn genesis() -> Self {
        Self {
            id: MessageId::genesis(),
            signer: PublicKey::new(ProcessorId(u32::MAX), 0),
            kind: MessageKind::Genesis,
            payload: Vec::new(),
            embedded: Vec::new(),
            timestamp: Some(0),
        }
    }

    pub fn block(
        signer: PublicKey,
        parent: MessageId,
        payload: Vec<u8>,
        timestamp: Option<Slot>,
    ) -> Self {
        Self::build(signer, MessageKind::Block { parent }, payload, Vec::new(), timestamp)
    }

    pub fn note(
        signer: PublicKey,
        payload: Vec<u8>,
        embedded: Vec<MessageId>,
        timestamp: Option<Slot>,
    ) -> Self {
        Self::build(signer, MessageKind::Note, payload, embedded, timestamp)
    }

    /// Returns a copy embedding `embedded`, with the id recomputed.
    pub fn with_embedded(self, embedded: Vec<MessageId>) -> Self {
        Self::build(self.signer, self.kind, self.payload, embedded, self.timestamp)
    }

    fn build(
        signer: PublicKey,
        kind: MessageKind,
        payload: Vec<u8>,
        embedded: Vec<MessageId>,
        timestamp: Option<Slot>,
    ) -> Self {
        let id = digest(&signer, &kind, &payload, &embedded, timestamp);
        Self {
            id,
            signer,
            kind,
            payload,
            embedded,
            timestamp,
        }
    }

    pub fn parent(&self) -> Option<MessageId> {
        match self.kind {
            MessageKind::Block { parent } => Some(parent),
            MessageKind::Genesis | MessageKind::Note => None,
        }
    }

    pub fn is_block(&self) -> bool {
        !matches!(self.kind, MessageKind::Note)
    }

    pub fn is_genesis(&self) -> bool {
        matches!(self.kind, MessageKind::Genesis)
    }

    /// True when the stored id matches the content.
    pub fn verify_id(&self) -> bool {
        if self.is_genesis() {
            return self.id == MessageId::genesis();
        }
        self.id
            == digest(
                &self.signer,
                &self.kind,
                &self.payload,
                &self.embedded,
                self.timestamp,
            )
    }
}

fn digest(
    signer: &PublicKey,
    kind: &MessageKind,
    payload: &[u8],
    embedded: &[MessageId],
    timestamp: Option<Slot>,
) -> MessageId {
    let mut h = Sha256::new();
    match kind {
        MessageKind::Block { parent } => {
            h.update(b"B");
            h.update(parent.as_bytes());
        }
        MessageKind::Note => h.update(b"N"),
        MessageKind::Genesis => h.update(b"G"),
    }
    h.update(signer.owner.0.to_le_bytes());
    h.update(signer.index.to_le_bytes());
    match timestamp {
        Some(t) => {
            h.update([1u8]);
            h.update(t.to_le_bytes());
        }
        None => h.update([0u8]),
    }
    h.update((payload.len() as u64).to_le_bytes());
    h.update(payload);
    h.update((embedded.len() as u64).to_le_bytes());
    for e in embedded {
        h.update(e.as_bytes());
    }
    MessageId(h.finalize().into())
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(p: u32, i: u32) -> PublicKey {
        PublicKey::new(ProcessorId(p), i)
    }

    #[test]
    fn ids_depend_on_every_field() {
        let g = MessageId::genesis();
        let a = Message::block(key(0, 0), g, vec![1], None);
        let variants = [
            Message::block(key(1, 0), g, vec![1], None),
            Message::block(key(0, 1), g, vec![1], None),
            Message::block(key(0, 0), g, vec![2], None),
            Message::block(key(0, 0), g, vec![1], Some(3)),
            Message::block(key(0, 0), a.id, vec![1], None),
            Message::note(key(0, 0), vec![1], vec![], None),
            a.clone().with_embedded(vec![g]),
        ];
        for v in &variants {
            assert_ne!(a.id, v.id);
            assert!(v.verify_id());
        }
        assert_eq!(a.id, Message::block(key(0, 0), g, vec![1], None).id);
    }

    #[test]
    fn message_json_round_trip() {
        let m = Message::block(key(2, 0), MessageId::genesis(), vec![0xab], Some(7))
            .with_embedded(vec![MessageId::genesis()]);
        let s = serde_json::to_string(&m).unwrap();
        let back: Message = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        assert!(back.verify_id());
    }

    #[test]
    fn bad_hex_id_is_rejected() {
        assert!("zz".parse::<MessageId>().is_err());
        assert!("abcd".parse::<MessageId>().is_err());
    }
}
