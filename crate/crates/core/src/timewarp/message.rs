//! Messages exchanged between logical processes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{EventKey, Transaction};

/// Logical process ordinal; equals the partition index it simulates.
pub type LpId = u32;

/// Version tag of the wire encoding produced by [`LpMessage::encode`].
pub const WIRE_VERSION: u32 = 1;

/// Unique message identity. Serials are never reused, not even after a
/// rollback, so a resend after cancellation is a different message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgId {
    pub lp: LpId,
    pub serial: u64,
}

impl MsgId {
    pub const MIN: MsgId = MsgId { lp: 0, serial: 0 };
    pub const MAX: MsgId = MsgId {
        lp: LpId::MAX,
        serial: u64::MAX,
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpMessage {
    /// A transaction crossing into the receiver's partition.
    Transaction { id: MsgId, txn: Transaction },
    /// Cancels the earlier message `target`, whose transaction had `key`.
    Anti {
        id: MsgId,
        target: MsgId,
        key: EventKey,
    },
    /// Returns the unprocessed transaction of message `target` to its sender.
    Cancelback {
        id: MsgId,
        target: MsgId,
        txn: Transaction,
    },
}

#[derive(Serialize, Deserialize)]
struct Wire {
    v: u32,
    msg: LpMessage,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported wire version {0}")]
    Version(u32),
}

impl LpMessage {
    pub fn id(&self) -> MsgId {
        match self {
            LpMessage::Transaction { id, .. }
            | LpMessage::Anti { id, .. }
            | LpMessage::Cancelback { id, .. } => *id,
        }
    }

    /// Simulation key the message may cause a rollback at.
    pub fn key(&self) -> EventKey {
        match self {
            LpMessage::Transaction { txn, .. } | LpMessage::Cancelback { txn, .. } => txn.key(),
            LpMessage::Anti { key, .. } => *key,
        }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(&Wire {
            v: WIRE_VERSION,
            msg: self.clone(),
        })
        .expect("message serializes")
    }

    pub fn decode(s: &str) -> Result<Self, WireError> {
        let w: Wire = serde_json::from_str(s)?;
        if w.v != WIRE_VERSION {
            return Err(WireError::Version(w.v));
        }
        Ok(w.msg)
    }
}
