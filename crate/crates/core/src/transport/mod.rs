//! In-process message layer and the two runners driving a parallel
//! simulation: a deterministic single-context scheduler and a concurrent
//! runner with one thread per process.
//!
//! Both deliver reliably and in FIFO order per ordered pair of endpoints, and
//! acknowledge every process-to-process message back to its sender.

mod concurrent;
mod deterministic;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{MovePos, Rng};
use crate::model::Model;
use crate::sync::{ControlAction, Controller, FinalReport, GvtReport, GvtResult, LpEndReport};
use crate::timewarp::{LogicalProcess, LpConfig, LpError, LpId, LpMessage, LpStats, MsgId};

pub use concurrent::run_concurrent;
pub use deterministic::{run_deterministic, CostModel, DeterministicOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Lp(LpId),
    Controller,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Lp(i) => write!(f, "lp{i}"),
            Endpoint::Controller => f.write_str("controller"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Message(LpMessage),
    Ack(MsgId),
    GvtPoll {
        round: u64,
    },
    GvtReport(GvtReport),
    GvtResult(GvtResult),
    /// A process asks for a GVT round (memory pressure or cancelback).
    GvtRequest,
    EndBarrier {
        end: MovePos,
    },
    EndReport(Box<LpEndReport>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub src: Endpoint,
    pub dst: Endpoint,
    /// Contiguous from 0 per ordered (src, dst) pair.
    pub seq: u64,
    pub payload: Payload,
}

/// Checks made by the transport while the run progresses. All zero in a
/// correct run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyLog {
    /// Deliveries of a transaction whose key lies below the GVT published
    /// before the delivery.
    pub deliveries_below_gvt: u64,
    /// Anti-transactions emitted for a key below the published GVT.
    pub antis_below_gvt: u64,
    /// Published GVT values that went backwards.
    pub gvt_regressions: u64,
    /// Deliveries out of sequence on their channel.
    pub fifo_violations: u64,
}

impl SafetyLog {
    pub fn is_clean(&self) -> bool {
        *self == SafetyLog::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportMode {
    Deterministic(DeterministicOptions),
    Concurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelConfig {
    pub lp: LpConfig,
    /// Controller-initiated GVT period, in (virtual or real) milliseconds.
    pub gvt_period_ms: f64,
    /// Limit on executed moves (re-executions included) over all processes.
    pub move_budget: u64,
    pub transport: TransportMode,
    /// Log every envelope at trace level.
    pub trace_envelopes: bool,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig {
            lp: LpConfig::default(),
            gvt_period_ms: 50.0,
            move_budget: crate::kernel::DEFAULT_MOVE_BUDGET,
            transport: TransportMode::Deterministic(DeterministicOptions::default()),
            trace_envelopes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: FinalReport,
    pub safety: SafetyLog,
    pub gvt_retries: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("move budget of {budget} exhausted")]
    BudgetExceeded { budget: u64, stats: Vec<LpStats> },
    #[error("logical process {lp} failed: {source}")]
    Lp { lp: LpId, source: LpError },
    #[error("all processes drained without reaching an end")]
    Drained,
}

/// Runs `model` in parallel under the configured transport.
pub fn run_parallel(
    model: Arc<Model>,
    rng: Rng,
    config: &ParallelConfig,
) -> Result<RunOutput, RunError> {
    match &config.transport {
        TransportMode::Deterministic(opts) => run_deterministic(model, rng, config, opts),
        TransportMode::Concurrent => run_concurrent(model, rng, config),
    }
}

/// Executed moves counted against the budget.
pub(crate) fn work_moves(s: &LpStats) -> u64 {
    s.moves_executed + s.coast_forward_moves
}

/// Feeds one payload to a process and collects what it sends in response.
pub(crate) fn lp_deliver(
    lp: &mut LogicalProcess,
    src: Endpoint,
    payload: Payload,
    now: f64,
    out: &mut Vec<(Endpoint, Payload)>,
) -> Result<(), LpError> {
    match payload {
        Payload::Message(msg) => {
            let Endpoint::Lp(from) = src else {
                unreachable!("process messages come from processes")
            };
            let id = msg.id();
            lp.receive(from, msg, now)?;
            out.push((src, Payload::Ack(id)));
        }
        Payload::Ack(id) => lp.on_ack(id),
        Payload::GvtPoll { round } => {
            out.push((
                Endpoint::Controller,
                Payload::GvtReport(lp.gvt_report(round)),
            ));
        }
        Payload::GvtResult(r) => lp.on_gvt(&r, now)?,
        Payload::EndBarrier { end } => {
            let report = lp.end_sync(end)?;
            out.push((Endpoint::Controller, Payload::EndReport(Box::new(report))));
        }
        Payload::GvtReport(_) | Payload::GvtRequest | Payload::EndReport(_) => {
            unreachable!("controller payload delivered to a process")
        }
    }
    collect_outbox(lp, out);
    Ok(())
}

pub(crate) fn collect_outbox(lp: &mut LogicalProcess, out: &mut Vec<(Endpoint, Payload)>) {
    for (dest, msg) in lp.take_outbox() {
        out.push((Endpoint::Lp(dest), Payload::Message(msg)));
    }
    if lp.take_gvt_request() {
        out.push((Endpoint::Controller, Payload::GvtRequest));
    }
}

/// Controller side of a delivery.
pub(crate) enum ControllerEvent {
    Actions(Vec<ControlAction>),
    Requested,
    AllEnded,
}

pub(crate) fn controller_deliver(c: &mut Controller, payload: Payload) -> ControllerEvent {
    match payload {
        Payload::GvtReport(r) => ControllerEvent::Actions(c.on_report(r)),
        Payload::GvtRequest => ControllerEvent::Requested,
        Payload::EndReport(r) => {
            if c.on_end_report(*r) {
                ControllerEvent::AllEnded
            } else {
                ControllerEvent::Actions(Vec::new())
            }
        }
        _ => unreachable!("process payload delivered to the controller"),
    }
}

/// Payload a control action broadcasts to every process.
pub(crate) fn broadcast_payload(action: &ControlAction) -> Option<Payload> {
    match action {
        ControlAction::Poll { round } => Some(Payload::GvtPoll { round: *round }),
        ControlAction::Result(r) => Some(Payload::GvtResult(*r)),
        ControlAction::EndBarrier { end } => Some(Payload::EndBarrier { end: *end }),
        ControlAction::Drained => None,
    }
}
