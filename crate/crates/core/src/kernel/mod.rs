//! Block semantics, the transaction chain and the sequential reference
//! simulator.

mod engine;
mod rng;
mod sequential;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::BlockRef;

pub use engine::{CanonicalState, EngineState, Generator, MoveEnd, MoveOutcome, TransactionChain};
pub use rng::Rng;
pub use sequential::{run_sequential, EndState, SequentialRun, SequentialSim};

/// Simulation time. Moving between blocks takes none of it.
pub type SimTime = u64;

/// Default limit on executed moves before a run is declared livelocked.
pub const DEFAULT_MOVE_BUDGET: u64 = 10_000_000;

/// Model-wide transaction identity: creating partition and a sequence number
/// unique within that partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Uid {
    pub partition: u32,
    pub seq: u64,
}

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.partition, self.seq)
    }
}

/// Ordering key of a transaction move: ascending time, then descending
/// priority, then ascending uid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventKey {
    pub time: SimTime,
    pub priority: i32,
    pub uid: Uid,
}

impl Ord for EventKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .cmp(&other.time)
            .then_with(|| other.priority.cmp(&self.priority))
            .then_with(|| self.uid.cmp(&other.uid))
    }
}

impl PartialOrd for EventKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.time, self.priority, self.uid)
    }
}

/// Position of a move in the total execution order.
///
/// A transaction crossing partitions keeps its [`EventKey`] (no time passes),
/// so `hop` counts crossings and orders the successive moves of the same
/// transaction at the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MovePos {
    pub key: EventKey,
    pub hop: u32,
}

impl MovePos {
    /// First position carrying `key`.
    pub fn first_at(key: EventKey) -> Self {
        MovePos { key, hop: 0 }
    }
}

impl fmt::Display for MovePos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.key, self.hop)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub uid: Uid,
    pub time: SimTime,
    pub priority: i32,
    /// Next block to enter.
    pub location: BlockRef,
    /// Partition crossings so far.
    pub hop: u32,
    /// Blocks entered so far; keys the TRANSFER draws.
    pub steps: u32,
    /// GENERATE block this arrival still has to leave, if it has not moved yet.
    pub pending_generate: Option<u32>,
}

impl Transaction {
    pub fn key(&self) -> EventKey {
        EventKey {
            time: self.time,
            priority: self.priority,
            uid: self.uid,
        }
    }

    pub fn pos(&self) -> MovePos {
        MovePos {
            key: self.key(),
            hop: self.hop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("transaction chain is empty")]
    EmptyChain,
    #[error("transaction {uid} did not leave partition {partition} within {steps} block entries")]
    RunawayMove {
        uid: Uid,
        partition: u32,
        steps: u32,
    },
    #[error("move budget of {budget} exhausted")]
    BudgetExceeded { budget: u64 },
    #[error("no pending transactions left and no partition reached its end")]
    Drained,
}
