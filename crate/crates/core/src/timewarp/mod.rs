//! Optimistic logical process (Time Warp) for one partition.
//!
//! The process executes moves ahead of any guarantee, saving a checkpoint
//! every `checkpoint_interval` moves. A message arriving at or below the last
//! executed key (a straggler), an anti-transaction for a processed input, or a
//! cancelback for one of its own sends rolls the process back: the latest
//! checkpoint below the target is restored and the moves between it and the
//! target are re-executed silently.
//!
//! Rollback always targets the first position of a key, so a move is undone
//! together with every other move sharing its key. With zero-time crossings a
//! transaction returning to the partition it left carries the same key as its
//! earlier move there, and that earlier move is redone.
//!
//! Under lazy cancellation, sends made by undone moves stay valid as long as
//! re-execution regenerates them; only sends that re-execution passes without
//! reproducing are cancelled. Aggressive cancellation cancels them all at
//! once, which never terminates on zero-time loops.

mod message;
mod stats;
#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::ops::Bound;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    EngineState, EventKey, KernelError, MoveEnd, MovePos, Rng, SimTime, Transaction,
};
use crate::lpcc::{self, Actuator, Lpcc, LpccConfig, SensorTotals, WindowDecision};
use crate::model::Model;
use crate::sync::{GvtReport, GvtResult, Horizon, LpEndReport};

pub use message::{LpId, LpMessage, MsgId, WireError, WIRE_VERSION};
pub use stats::{Diagnostics, LpStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cancellation {
    Lazy,
    Aggressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpConfig {
    pub cancellation: Cancellation,
    /// Checkpoint after this many executed moves.
    pub checkpoint_interval: u32,
    pub lpcc: Option<LpccConfig>,
    /// Ask for a GVT round once this many checkpoints are held.
    pub fossil_demand_checkpoints: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        LpConfig {
            cancellation: Cancellation::Lazy,
            checkpoint_interval: 1,
            lpcc: None,
            fossil_demand_checkpoints: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpMode {
    Normal,
    /// Window exceeded: no moves until enough history is committed.
    Cancelback,
    /// The move at this position drove the counter to zero.
    ProvisionalEnd(MovePos),
    /// Synchronised to the confirmed end; frozen.
    Ended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Executed(MovePos),
    ProvisionalEndReached(MovePos),
    /// Returned one pending input to its sender.
    CancelledBack,
    /// Nothing to do right now.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("GVT went backwards from {from} to {to}")]
    GvtRegression { from: Horizon, to: Horizon },
    #[error("no checkpoint below {0}")]
    MissingCheckpoint(MovePos),
}

#[derive(Debug, Clone)]
enum Source {
    Chain,
    Input { id: MsgId, txn: Transaction },
}

#[derive(Debug, Clone)]
struct ExecRecord {
    pos: MovePos,
    source: Source,
}

#[derive(Debug, Clone)]
struct Checkpoint {
    /// Last move included; `None` for the initial state.
    after: Option<MovePos>,
    state: EngineState,
}

#[derive(Debug, Clone)]
struct SentEntry {
    dest: LpId,
    txn: Transaction,
    cancel_pending: bool,
}

/// Result of a rollback, mostly for tests and tracing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RollbackReceipt {
    pub undone: u64,
    pub coasted: u64,
    pub restored_from: Option<MovePos>,
}

#[derive(Debug, Clone)]
pub struct LogicalProcess {
    id: LpId,
    model: Arc<Model>,
    rng: Rng,
    config: LpConfig,
    state: EngineState,
    mode: LpMode,

    executed: VecDeque<ExecRecord>,
    /// Leading records of `executed` that are committed.
    committed_in_log: usize,
    checkpoints: VecDeque<Checkpoint>,
    since_checkpoint: u32,

    pending: BTreeMap<(MovePos, MsgId), Transaction>,
    processed: BTreeSet<(MovePos, MsgId)>,
    input_index: HashMap<MsgId, MovePos>,
    cancelled_back: HashMap<MsgId, EventKey>,
    orphan_antis: HashMap<MsgId, EventKey>,

    sent_log: BTreeMap<(MovePos, MsgId), SentEntry>,
    sent_index: HashMap<MsgId, MovePos>,
    cancel_pending: BTreeSet<(MovePos, MsgId)>,
    unacked: HashMap<MsgId, (LpId, EventKey)>,
    unacked_keys: BTreeSet<(EventKey, MsgId)>,

    next_serial: u64,
    sent: Vec<u64>,
    received: Vec<u64>,
    acked: Vec<u64>,
    gvt: Option<Horizon>,

    lpcc: Option<Lpcc>,
    moves_since_eval: u64,
    gvt_wanted: bool,
    gvt_requested: bool,
    /// A cancelback went out since the last GVT.
    cancelled_since_gvt: bool,

    stats: LpStats,
    diag: Diagnostics,
    outbox: Vec<(LpId, LpMessage)>,
}

impl LogicalProcess {
    pub fn new(id: LpId, model: Arc<Model>, rng: Rng, config: LpConfig) -> Self {
        assert!(config.checkpoint_interval >= 1);
        let lp_count = model.partition_count();
        let state = EngineState::new(&model, id, &rng);
        let mut lpcc = config.lpcc.map(Lpcc::new);
        if let Some(c) = lpcc.as_mut() {
            c.restart_interval(SensorTotals::default(), 0.0);
        }
        LogicalProcess {
            id,
            rng,
            config,
            checkpoints: VecDeque::from([Checkpoint {
                after: None,
                state: state.clone(),
            }]),
            state,
            model,
            mode: LpMode::Normal,
            executed: VecDeque::new(),
            committed_in_log: 0,
            since_checkpoint: 0,
            pending: BTreeMap::new(),
            processed: BTreeSet::new(),
            input_index: HashMap::new(),
            cancelled_back: HashMap::new(),
            orphan_antis: HashMap::new(),
            sent_log: BTreeMap::new(),
            sent_index: HashMap::new(),
            cancel_pending: BTreeSet::new(),
            unacked: HashMap::new(),
            unacked_keys: BTreeSet::new(),
            next_serial: 0,
            sent: vec![0; lp_count],
            received: vec![0; lp_count],
            acked: vec![0; lp_count],
            gvt: None,
            lpcc,
            moves_since_eval: 0,
            gvt_wanted: false,
            gvt_requested: false,
            cancelled_since_gvt: false,
            stats: LpStats::default(),
            diag: Diagnostics::default(),
            outbox: Vec::new(),
        }
    }

    pub fn id(&self) -> LpId {
        self.id
    }

    pub fn mode(&self) -> LpMode {
        self.mode
    }

    pub fn stats(&self) -> &LpStats {
        &self.stats
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diag
    }

    /// Current (speculative) engine state.
    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn known_gvt(&self) -> Option<Horizon> {
        self.gvt
    }

    pub fn last_executed(&self) -> Option<MovePos> {
        self.executed.back().map(|r| r.pos)
    }

    pub fn uncommitted(&self) -> u64 {
        (self.executed.len() - self.committed_in_log) as u64
    }

    pub fn checkpoint_count(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn actuator(&self) -> Option<Actuator> {
        self.lpcc.as_ref().map(Lpcc::actuator)
    }

    pub fn actuator_trace(&self) -> &[lpcc::ActuatorSample] {
        self.lpcc.as_ref().map_or(&[], |c| c.trace())
    }

    /// Messages produced since the last call.
    pub fn take_outbox(&mut self) -> Vec<(LpId, LpMessage)> {
        std::mem::take(&mut self.outbox)
    }

    /// Asks for a GVT round, at most once per published GVT.
    fn request_gvt(&mut self) {
        if !self.gvt_requested {
            self.gvt_requested = true;
            self.gvt_wanted = true;
        }
    }

    /// Whether the process asked for a GVT round since the last call.
    pub fn take_gvt_request(&mut self) -> bool {
        std::mem::take(&mut self.gvt_wanted)
    }

    /// Position of the next move to execute.
    pub fn next_pos(&self) -> Option<MovePos> {
        let chain = self.state.next_pos();
        let input = self.pending.keys().next().map(|(p, _)| *p);
        match (chain, input) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Lower bound on any key this process may still execute or send.
    pub fn local_min(&self) -> Horizon {
        if self.mode == LpMode::Ended {
            return Horizon::Infinity;
        }
        let mut m = Horizon::Infinity;
        if let LpMode::ProvisionalEnd(_) = self.mode {
            // executes nothing until rolled back, which a message would cause
        } else if let Some(p) = self.next_pos() {
            m = m.min(Horizon::Key(p.key));
        }
        if let Some(((p, _), _)) = self.pending.iter().next() {
            m = m.min(Horizon::Key(p.key));
        }
        if let Some((k, _)) = self.unacked_keys.iter().next() {
            m = m.min(Horizon::Key(*k));
        }
        if let Some((p, _)) = self.cancel_pending.iter().next() {
            m = m.min(Horizon::Key(p.key));
        }
        m
    }

    pub fn gvt_report(&self, round: u64) -> GvtReport {
        GvtReport {
            lp: self.id,
            round,
            local_min: self.local_min(),
            sent: self.sent.clone(),
            received: self.received.clone(),
            acked: self.acked.clone(),
            provisional_end: match self.mode {
                LpMode::ProvisionalEnd(e) => Some(e),
                _ => None,
            },
        }
    }

    fn new_id(&mut self) -> MsgId {
        let id = MsgId {
            lp: self.id,
            serial: self.next_serial,
        };
        self.next_serial += 1;
        id
    }

    fn emit(&mut self, dest: LpId, msg: LpMessage) {
        let id = msg.id();
        let key = msg.key();
        self.unacked.insert(id, (dest, key));
        self.unacked_keys.insert((key, id));
        self.sent[dest as usize] += 1;
        self.outbox.push((dest, msg));
    }

    /// Acknowledgement of our message `id`, delivered by the transport.
    pub fn on_ack(&mut self, id: MsgId) {
        if let Some((dest, key)) = self.unacked.remove(&id) {
            self.unacked_keys.remove(&(key, id));
            self.acked[dest as usize] += 1;
        }
    }

    fn sensor_totals(&self) -> SensorTotals {
        let s = &self.stats;
        SensorTotals {
            moves_executed: s.moves_executed,
            moves_committed: s.moves_committed,
            moves_rolled_back: s.moves_rolled_back,
            rollbacks: s.rollbacks,
            transactions_sent: s.transactions_sent,
            transactions_received: s.transactions_received,
            anti_sent: s.anti_sent,
            anti_received: s.anti_received,
            cancelbacks_received: s.cancelbacks_received,
            lvt: self.state.clock,
            gvt: self.gvt.and_then(|g| g.time()).unwrap_or(0),
            uncommitted: self.uncommitted(),
            state_list_size: self.checkpoints.len() as u64,
        }
    }

    fn evaluate_lpcc(&mut self, now: f64) {
        if !matches!(self.mode, LpMode::Normal | LpMode::Cancelback) {
            return;
        }
        let totals = self.sensor_totals();
        if let Some(c) = self.lpcc.as_mut() {
            c.evaluate(totals, now);
        }
        self.moves_since_eval = 0;
    }

    /// Executes one move, or in cancelback mode returns one pending input.
    pub fn step(&mut self, now: f64) -> Result<StepOutcome, LpError> {
        match self.mode {
            LpMode::Ended | LpMode::ProvisionalEnd(_) => return Ok(StepOutcome::Idle),
            LpMode::Cancelback => {
                let (actuator, hysteresis) = match &self.lpcc {
                    Some(c) => (c.actuator(), c.config.hysteresis),
                    None => (Actuator::Unlimited, 1.0),
                };
                if lpcc::may_leave_cancelback(self.uncommitted(), actuator, hysteresis) {
                    self.mode = LpMode::Normal;
                } else {
                    return Ok(self.cancel_back_one());
                }
            }
            LpMode::Normal => {}
        }

        let Some(next) = self.next_pos() else {
            self.flush_cancel_pending(None);
            return Ok(StepOutcome::Idle);
        };
        self.flush_cancel_pending(Some(next));

        if let Some(c) = &self.lpcc {
            let actuator = c.actuator();
            if lpcc::check_window(self.uncommitted(), actuator) == WindowDecision::EnterCancelback {
                self.mode = LpMode::Cancelback;
                self.stats.cancelback_mode_entries += 1;
                self.request_gvt();
                return Ok(self.cancel_back_one());
            }
        }

        let (source, outcome) = if self.state.next_pos() == Some(next) {
            (
                Source::Chain,
                self.state.execute_move(&self.model, &self.rng)?,
            )
        } else {
            let ((pos, id), txn) = self
                .pending
                .pop_first()
                .expect("pending input at next position");
            self.processed.insert((pos, id));
            let out = self.state.advance(&self.model, &self.rng, txn.clone())?;
            (Source::Input { id, txn }, out)
        };
        debug_assert_eq!(outcome.pos, next);
        self.executed.push_back(ExecRecord { pos: next, source });
        self.stats.moves_executed += 1;
        self.take_checkpoint_if_due(next);

        if let MoveEnd::Departed(txn) = outcome.end {
            self.send_transaction(next, txn);
        }
        self.flush_cancel_pending(Some(next_after(next)));

        if self.checkpoints.len() >= self.config.fossil_demand_checkpoints {
            self.request_gvt();
        }
        if outcome.end_reached {
            self.mode = LpMode::ProvisionalEnd(next);
            return Ok(StepOutcome::ProvisionalEndReached(next));
        }
        if let Some(c) = &self.lpcc {
            self.moves_since_eval += 1;
            if self.moves_since_eval >= c.config.eval_every_moves {
                self.evaluate_lpcc(now);
            }
        }
        Ok(StepOutcome::Executed(next))
    }

    fn take_checkpoint_if_due(&mut self, pos: MovePos) {
        self.since_checkpoint += 1;
        if self.since_checkpoint >= self.config.checkpoint_interval {
            self.checkpoints.push_back(Checkpoint {
                after: Some(pos),
                state: self.state.clone(),
            });
            self.since_checkpoint = 0;
            self.stats.checkpoints_taken += 1;
        }
    }

    fn send_transaction(&mut self, at: MovePos, txn: Transaction) {
        let dest = txn.location.partition;
        // lazy cancellation: an identical send from the undone execution stands
        let lo = (at, MsgId::MIN);
        let hi = (at, MsgId::MAX);
        let matched = self
            .sent_log
            .range_mut(lo..=hi)
            .find(|(_, e)| e.cancel_pending && e.dest == dest && e.txn == txn)
            .map(|(k, e)| {
                e.cancel_pending = false;
                *k
            });
        if let Some(k) = matched {
            self.cancel_pending.remove(&k);
            self.stats.resends_suppressed += 1;
            return;
        }
        let id = self.new_id();
        self.sent_log.insert(
            (at, id),
            SentEntry {
                dest,
                txn: txn.clone(),
                cancel_pending: false,
            },
        );
        self.sent_index.insert(id, at);
        self.stats.transactions_sent += 1;
        self.emit(dest, LpMessage::Transaction { id, txn });
    }

    /// Sends anti-transactions for cancellation-pending sends below `upto`
    /// (all of them when `None`).
    fn flush_cancel_pending(&mut self, upto: Option<MovePos>) {
        while let Some(&(pos, id)) = self.cancel_pending.first() {
            if upto.is_some_and(|u| pos >= u) {
                break;
            }
            self.cancel_pending.pop_first();
            self.cancel_send(pos, id);
        }
    }

    fn cancel_send(&mut self, pos: MovePos, id: MsgId) {
        let entry = self.sent_log.remove(&(pos, id)).expect("logged send");
        self.sent_index.remove(&id);
        let key = entry.txn.key();
        if self.gvt.is_some_and(|g| g.passed(key)) {
            self.diag.antis_below_gvt += 1;
        }
        let anti = self.new_id();
        self.stats.anti_sent += 1;
        self.emit(
            entry.dest,
            LpMessage::Anti {
                id: anti,
                target: id,
                key,
            },
        );
    }

    /// Returns the pending input with the largest key while more inputs than
    /// the actuator limit wait beyond the next local move. Inputs ahead of
    /// the local chain are what lets the process continue once the window
    /// opens, and the sender pays for each returned one with a rollback, so
    /// at most one goes back per GVT.
    fn cancel_back_one(&mut self) -> StepOutcome {
        let limit = match self.lpcc.as_ref().map(|c| c.actuator()) {
            Some(Actuator::Bounded(n)) => n,
            _ => u64::MAX,
        };
        let beyond = match self.state.next_pos() {
            Some(local) => self
                .pending
                .range((Bound::Excluded((local, MsgId::MAX)), Bound::Unbounded))
                .count() as u64,
            None => self.pending.len() as u64,
        };
        if beyond <= limit || self.cancelled_since_gvt {
            // nothing to return: wait for commitment
            self.request_gvt();
            return StepOutcome::Idle;
        }
        let ((_, id), txn) = self.pending.pop_last().unwrap();
        self.input_index.remove(&id);
        self.cancelled_back.insert(id, txn.key());
        let cb = self.new_id();
        self.stats.cancelbacks_sent += 1;
        self.cancelled_since_gvt = true;
        self.emit(
            id.lp,
            LpMessage::Cancelback {
                id: cb,
                target: id,
                txn,
            },
        );
        StepOutcome::CancelledBack
    }

    /// Handles a message from process `from`.
    pub fn receive(&mut self, from: LpId, msg: LpMessage, now: f64) -> Result<(), LpError> {
        self.received[from as usize] += 1;
        if self.mode == LpMode::Ended {
            return Ok(());
        }
        let key = msg.key();
        if self.gvt.is_some_and(|g| g.passed(key)) {
            self.diag.received_below_gvt += 1;
        }
        match msg {
            LpMessage::Transaction { id, txn } => {
                self.stats.transactions_received += 1;
                if self.orphan_antis.remove(&id).is_some() {
                    return Ok(());
                }
                if self.last_executed().is_some_and(|l| l.key >= key) {
                    self.rollback(MovePos::first_at(key), now)?;
                }
                let pos = txn.pos();
                self.pending.insert((pos, id), txn);
                self.input_index.insert(id, pos);
            }
            LpMessage::Anti { target, key, .. } => {
                self.stats.anti_received += 1;
                if let Some(pos) = self.input_index.get(&target).copied() {
                    if self.processed.contains(&(pos, target)) {
                        self.rollback(MovePos::first_at(key), now)?;
                    }
                    let removed = self.pending.remove(&(pos, target));
                    debug_assert!(removed.is_some());
                    self.input_index.remove(&target);
                } else if self.cancelled_back.remove(&target).is_none() {
                    self.orphan_antis.insert(target, key);
                }
            }
            LpMessage::Cancelback { target, .. } => {
                self.stats.cancelbacks_received += 1;
                if let Some(pos) = self.sent_index.remove(&target) {
                    let entry = self.sent_log.remove(&(pos, target)).expect("logged send");
                    if entry.cancel_pending {
                        // already undone; the receiver has dropped it
                        self.cancel_pending.remove(&(pos, target));
                    } else {
                        self.rollback(MovePos::first_at(pos.key), now)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Undoes every executed move at or after `bound`.
    pub fn rollback(&mut self, bound: MovePos, now: f64) -> Result<RollbackReceipt, LpError> {
        if self.gvt.is_some_and(|g| g.passed(bound.key)) {
            self.diag.rollbacks_below_gvt += 1;
        }
        let (undone, receipt) = self.restore_before(bound)?;
        if undone.is_empty() {
            return Ok(receipt);
        }
        self.stats.rollbacks += 1;
        self.stats.moves_rolled_back += undone.len() as u64;
        for rec in undone {
            if let Source::Input { id, txn } = rec.source {
                self.processed.remove(&(rec.pos, id));
                self.pending.insert((rec.pos, id), txn);
            }
        }
        let affected: Vec<(MovePos, MsgId)> = self
            .sent_log
            .range((bound, MsgId::MIN)..)
            .filter(|(_, e)| !e.cancel_pending)
            .map(|(k, _)| *k)
            .collect();
        match self.config.cancellation {
            Cancellation::Aggressive => {
                for (pos, id) in affected {
                    self.cancel_send(pos, id);
                }
            }
            Cancellation::Lazy => {
                for k in affected {
                    self.sent_log.get_mut(&k).unwrap().cancel_pending = true;
                    self.cancel_pending.insert(k);
                }
            }
        }
        if let LpMode::ProvisionalEnd(e) = self.mode {
            if e >= bound {
                self.mode = LpMode::Normal;
                let totals = self.sensor_totals();
                if let Some(c) = self.lpcc.as_mut() {
                    c.restart_interval(totals, now);
                }
            }
        }
        Ok(receipt)
    }

    /// Restores the state just before `bound`; returns the undone records.
    fn restore_before(
        &mut self,
        bound: MovePos,
    ) -> Result<(Vec<ExecRecord>, RollbackReceipt), LpError> {
        let idx = self.executed.partition_point(|r| r.pos < bound);
        if idx == self.executed.len() {
            return Ok((
                Vec::new(),
                RollbackReceipt {
                    undone: 0,
                    coasted: 0,
                    restored_from: None,
                },
            ));
        }
        let undone: Vec<ExecRecord> = self.executed.drain(idx..).collect();
        let keep = self
            .checkpoints
            .partition_point(|c| c.after.is_none_or(|a| a < bound));
        if keep == 0 {
            return Err(LpError::MissingCheckpoint(bound));
        }
        self.checkpoints.truncate(keep);
        let cp = self.checkpoints.back().unwrap();
        let restored_from = cp.after;
        self.state = cp.state.clone();
        let start = match restored_from {
            None => 0,
            Some(a) => self.executed.partition_point(|r| r.pos <= a),
        };
        let mut coasted = 0u64;
        for i in start..self.executed.len() {
            let rec = &self.executed[i];
            let out = match &rec.source {
                Source::Chain => self.state.execute_move(&self.model, &self.rng)?,
                Source::Input { txn, .. } => {
                    self.state.advance(&self.model, &self.rng, txn.clone())?
                }
            };
            debug_assert_eq!(out.pos, rec.pos);
            coasted += 1;
        }
        self.stats.coast_forward_moves += coasted;
        self.since_checkpoint = coasted as u32;
        let receipt = RollbackReceipt {
            undone: undone.len() as u64,
            coasted,
            restored_from,
        };
        Ok((undone, receipt))
    }

    /// Applies a published GVT: commits history below it and reclaims memory.
    pub fn on_gvt(&mut self, result: &GvtResult, now: f64) -> Result<(), LpError> {
        if self.mode == LpMode::Ended {
            return Ok(());
        }
        if let Some(prev) = self.gvt {
            if result.gvt < prev {
                self.diag.gvt_regressions += 1;
                return Err(LpError::GvtRegression {
                    from: prev,
                    to: result.gvt,
                });
            }
        }
        if result.confirmed_end.is_some() {
            // the end barrier follows and commits exactly up to the end
            return Ok(());
        }
        self.gvt = Some(result.gvt);
        self.gvt_requested = false;
        self.commit(result.gvt);
        self.cancelled_since_gvt = false;
        self.evaluate_lpcc(now);
        Ok(())
    }

    fn commit(&mut self, gvt: Horizon) {
        let newly = self
            .executed
            .iter()
            .skip(self.committed_in_log)
            .take_while(|r| gvt.passed(r.pos.key))
            .count();
        self.committed_in_log += newly;
        self.stats.moves_committed += newly as u64;

        // keep the latest checkpoint below GVT and everything after it
        let below = self
            .checkpoints
            .partition_point(|c| c.after.is_none_or(|a| gvt.passed(a.key)));
        if below > 1 {
            self.checkpoints.drain(..below - 1);
        }
        if let Some(a) = self.checkpoints.front().and_then(|c| c.after) {
            let drop = self.executed.partition_point(|r| r.pos <= a);
            let drop = drop.min(self.committed_in_log);
            self.executed.drain(..drop);
            self.committed_in_log -= drop;
        }

        while let Some(&(pos, id)) = self.processed.first() {
            if !gvt.passed(pos.key) {
                break;
            }
            self.processed.pop_first();
            self.input_index.remove(&id);
        }
        while let Some((&(pos, id), e)) = self.sent_log.first_key_value() {
            if !gvt.passed(pos.key) || e.cancel_pending {
                break;
            }
            self.sent_log.pop_first();
            self.sent_index.remove(&id);
        }
        self.cancelled_back.retain(|_, k| !gvt.passed(*k));
    }

    /// Synchronises to the confirmed end `end`: moves after it are discarded
    /// without messages, the rest is committed and the process freezes.
    pub fn end_sync(&mut self, end: MovePos) -> Result<LpEndReport, LpError> {
        if self.mode != LpMode::Ended {
            let bound = next_after(end);
            let (undone, _) = self.restore_before(bound)?;
            self.stats.moves_discarded_at_end += undone.len() as u64;
            let rest = self.uncommitted();
            self.stats.moves_committed += rest;
            self.committed_in_log = self.executed.len();
            self.diag.unmatched_antis += self.orphan_antis.len() as u64;
            self.mode = LpMode::Ended;
        }
        Ok(LpEndReport {
            lp: self.id,
            counter: self.state.counter,
            entry_counts: self.state.entry_counts.clone(),
            stats: self.stats,
            diagnostics: self.diag.clone(),
            actuator_trace: self.actuator_trace().to_vec(),
            canonical_state: self.end_state(end).canonical(),
        })
    }

    /// Engine state with the unprocessed inputs sent by moves up to `end`,
    /// comparable to a sequential run's partition state at the same end.
    fn end_state(&self, end: MovePos) -> EngineState {
        let mut s = self.state.clone();
        for ((pos, _), txn) in &self.pending {
            // sent by the sender's move one hop earlier
            if pos.hop > 0
                && (MovePos {
                    hop: pos.hop - 1,
                    ..*pos
                }) <= end
            {
                s.chain.insert(txn.clone());
            }
        }
        s
    }

    /// Clock of the last executed move.
    pub fn lvt(&self) -> SimTime {
        self.state.clock
    }
}

/// Smallest position strictly after `p`.
fn next_after(p: MovePos) -> MovePos {
    MovePos {
        hop: p.hop + 1,
        ..p
    }
}
