//! Optimistic parallel simulation of partitioned GPSS/H models.
//!
//! A model is split into partitions, each run by an optimistic logical
//! process (Time Warp). Transactions crossing partitions are messages;
//! stragglers trigger rollbacks; lazy cancellation suppresses resends that
//! re-execution reproduces. A controller computes GVT, commits history,
//! confirms the end of the simulation and synchronises every partition to the
//! same end state that a sequential run reaches. Each process can carry an
//! adaptive optimism controller that limits its uncommitted moves.

pub mod cli;
pub mod kernel;
pub mod lpcc;
pub mod model;
pub mod sync;
pub mod timewarp;
pub mod transport;
