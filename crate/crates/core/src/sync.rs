//! Simulation controller: GVT rounds, end confirmation, forced end
//! synchronisation and the final report.
//!
//! A GVT round polls every process for a snapshot of its local minimum and
//! its cumulative message counts. Reports are taken at different instants, so
//! a message can be in flight between the sender's and the receiver's
//! snapshot. That is harmless as long as the sender still counted it as
//! unacknowledged (and so included its key in the local minimum); acks only
//! follow delivery, so this holds whenever the sender has not yet received
//! acks for more messages than the receiver reports to have received. Rounds
//! where that cannot be guaranteed are retried.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::kernel::{EndState, EventKey, MovePos, SimTime};
use crate::lpcc::ActuatorSample;
use crate::model::Model;
use crate::timewarp::{Diagnostics, LpId, LpStats};

/// Either a key or positive infinity (nothing left anywhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Horizon {
    Key(EventKey),
    Infinity,
}

impl Horizon {
    pub fn of(key: Option<EventKey>) -> Self {
        key.map_or(Horizon::Infinity, Horizon::Key)
    }

    /// Whether a move at `key` lies strictly below this horizon.
    pub fn passed(&self, key: EventKey) -> bool {
        Horizon::Key(key) < *self
    }

    pub fn time(&self) -> Option<SimTime> {
        match self {
            Horizon::Key(k) => Some(k.time),
            Horizon::Infinity => None,
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Key(k) => k.fmt(f),
            Horizon::Infinity => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GvtReport {
    pub lp: LpId,
    pub round: u64,
    /// Minimum over the next move, pending inputs, unacknowledged sends and
    /// sends awaiting lazy cancellation.
    pub local_min: Horizon,
    /// Cumulative messages sent to each process.
    pub sent: Vec<u64>,
    /// Cumulative messages received from each process.
    pub received: Vec<u64>,
    /// Cumulative acks received from each process.
    pub acked: Vec<u64>,
    pub provisional_end: Option<MovePos>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GvtResult {
    pub round: u64,
    pub gvt: Horizon,
    pub confirmed_end: Option<MovePos>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvtOutcome {
    Gvt(Horizon),
    Retry,
}

/// GVT from one report per process, or `Retry` if a message may be in flight
/// without being covered by its sender's minimum.
pub fn compute_gvt(reports: &[GvtReport]) -> GvtOutcome {
    let n = reports.len();
    for (i, r) in reports.iter().enumerate() {
        if r.sent.len() != n || r.received.len() != n || r.acked.len() != n {
            return GvtOutcome::Retry;
        }
        for (j, other) in reports.iter().enumerate() {
            let received = other.received[i];
            if r.sent[j] != received && r.acked[j] > received {
                return GvtOutcome::Retry;
            }
        }
    }
    GvtOutcome::Gvt(
        reports
            .iter()
            .map(|r| r.local_min)
            .min()
            .unwrap_or(Horizon::Infinity),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndDecision {
    Confirmed(MovePos),
    NotYet,
}

/// The earliest provisional end is confirmed once GVT has passed its key.
pub fn confirm_end(gvt: Horizon, pending: impl IntoIterator<Item = MovePos>) -> EndDecision {
    match pending.into_iter().min() {
        Some(e) if gvt.passed(e.key) => EndDecision::Confirmed(e),
        _ => EndDecision::NotYet,
    }
}

/// What a process hands back after end synchronisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpEndReport {
    pub lp: LpId,
    pub counter: i64,
    pub entry_counts: Vec<u64>,
    pub stats: LpStats,
    pub diagnostics: Diagnostics,
    pub actuator_trace: Vec<ActuatorSample>,
    /// Canonical serialization of the synchronised engine state, with the
    /// inputs sent up to the end merged into the chain.
    pub canonical_state: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GvtSample {
    pub round: u64,
    pub gvt: Horizon,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlAction {
    Poll {
        round: u64,
    },
    Result(GvtResult),
    EndBarrier {
        end: MovePos,
    },
    /// Every process is idle and none reached its end.
    Drained,
}

/// Single-owner controller state machine; the transport feeds it reports and
/// broadcasts the actions it returns.
#[derive(Debug, Clone)]
pub struct Controller {
    lp_count: usize,
    round: u64,
    collecting: Option<Vec<Option<GvtReport>>>,
    last: Option<Horizon>,
    log: Vec<GvtSample>,
    retries: u64,
    end: Option<MovePos>,
    end_reports: Vec<Option<LpEndReport>>,
}

impl Controller {
    pub fn new(lp_count: usize) -> Self {
        Controller {
            lp_count,
            round: 0,
            collecting: None,
            last: None,
            log: Vec::new(),
            retries: 0,
            end: None,
            end_reports: vec![None; lp_count],
        }
    }

    pub fn round_in_progress(&self) -> bool {
        self.collecting.is_some()
    }

    pub fn confirmed_end(&self) -> Option<MovePos> {
        self.end
    }

    pub fn gvt(&self) -> Option<Horizon> {
        self.last
    }

    pub fn gvt_log(&self) -> &[GvtSample] {
        &self.log
    }

    pub fn retries(&self) -> u64 {
        self.retries
    }

    /// Opens a new round unless one is running or the end is confirmed.
    pub fn start_round(&mut self) -> Option<ControlAction> {
        if self.collecting.is_some() || self.end.is_some() {
            return None;
        }
        self.round += 1;
        self.collecting = Some(vec![None; self.lp_count]);
        Some(ControlAction::Poll { round: self.round })
    }

    pub fn on_report(&mut self, report: GvtReport) -> Vec<ControlAction> {
        let Some(slots) = self.collecting.as_mut() else {
            return Vec::new();
        };
        if report.round != self.round {
            return Vec::new();
        }
        let lp = report.lp as usize;
        slots[lp] = Some(report);
        if slots.iter().any(Option::is_none) {
            return Vec::new();
        }
        let reports: Vec<GvtReport> = self
            .collecting
            .take()
            .unwrap()
            .into_iter()
            .map(Option::unwrap)
            .collect();
        let gvt = match compute_gvt(&reports) {
            GvtOutcome::Retry => {
                self.retries += 1;
                return self.start_round().into_iter().collect();
            }
            GvtOutcome::Gvt(g) => g,
        };
        self.last = Some(gvt);
        self.log.push(GvtSample {
            round: self.round,
            gvt,
        });
        let decision = confirm_end(gvt, reports.iter().filter_map(|r| r.provisional_end));
        match decision {
            EndDecision::Confirmed(e) => {
                self.end = Some(e);
                vec![
                    ControlAction::Result(GvtResult {
                        round: self.round,
                        gvt,
                        confirmed_end: Some(e),
                    }),
                    ControlAction::EndBarrier { end: e },
                ]
            }
            EndDecision::NotYet if gvt == Horizon::Infinity => vec![ControlAction::Drained],
            EndDecision::NotYet => vec![ControlAction::Result(GvtResult {
                round: self.round,
                gvt,
                confirmed_end: None,
            })],
        }
    }

    /// Stores an end report; true once all processes have reported.
    pub fn on_end_report(&mut self, report: LpEndReport) -> bool {
        let lp = report.lp as usize;
        self.end_reports[lp] = Some(report);
        self.end_reports.iter().all(Option::is_some)
    }

    /// Assembles the final report once every process has reported.
    pub fn finish(&mut self, model: &Model, wall_secs: f64) -> Option<FinalReport> {
        let end = self.end?;
        if self.end_reports.iter().any(Option::is_none) {
            return None;
        }
        let reports: Vec<LpEndReport> = self
            .end_reports
            .iter()
            .map(|r| r.clone().unwrap())
            .collect();
        Some(assemble_report(model, end, &reports, &self.log, wall_secs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub name: String,
    pub counter: i64,
    pub entry_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub partitions: Vec<PartitionReport>,
    pub end_clock: SimTime,
    pub ending: MovePos,
    /// Empty for sequential runs.
    pub lp_stats: Vec<LpStats>,
    pub diagnostics: Diagnostics,
    pub gvt_log: Vec<GvtSample>,
    pub actuator_traces: Vec<Vec<ActuatorSample>>,
    /// Canonical synchronised engine state per partition; empty for
    /// sequential runs.
    pub end_states: Vec<String>,
    pub wall_secs: f64,
}

impl FinalReport {
    pub fn from_sequential(model: &Model, end: &EndState, wall_secs: f64) -> Self {
        FinalReport {
            partitions: model
                .partitions
                .iter()
                .enumerate()
                .map(|(i, p)| PartitionReport {
                    name: p.name.clone(),
                    counter: end.counters[i],
                    entry_counts: end.entry_counts[i].clone(),
                })
                .collect(),
            end_clock: end.end_clock,
            ending: end.ending,
            lp_stats: Vec::new(),
            diagnostics: Diagnostics::default(),
            gvt_log: Vec::new(),
            actuator_traces: Vec::new(),
            end_states: Vec::new(),
            wall_secs,
        }
    }

    pub fn end_state(&self) -> EndState {
        EndState {
            counters: self.partitions.iter().map(|p| p.counter).collect(),
            entry_counts: self
                .partitions
                .iter()
                .map(|p| p.entry_counts.clone())
                .collect(),
            end_clock: self.end_clock,
            ending: self.ending,
        }
    }

    /// Plain-text rendering: one section per partition, then the statistics.
    pub fn render_text(&self, model: &Model) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "End clock: {}", self.end_clock);
        let _ = writeln!(out, "Ending move: {}", self.ending);
        for (i, p) in self.partitions.iter().enumerate() {
            let _ = writeln!(out);
            let _ = writeln!(out, "PARTITION {} (counter {})", p.name, p.counter);
            let _ = writeln!(
                out,
                "  {:>5}  {:<12} {:<10} {:>10}",
                "BLOCK", "LABEL", "TYPE", "ENTRIES"
            );
            for (b, n) in p.entry_counts.iter().enumerate() {
                let block = &model.partitions[i].blocks[b];
                let _ = writeln!(
                    out,
                    "  {:>5}  {:<12} {:<10} {:>10}",
                    b + 1,
                    block.label.as_deref().unwrap_or(""),
                    block.kind.opcode(),
                    n
                );
            }
        }
        if !self.lp_stats.is_empty() {
            let _ = writeln!(out);
            let names: Vec<&str> = self.partitions.iter().map(|p| p.name.as_str()).collect();
            out.push_str(&render_stats_table(&names, &self.lp_stats));
        }
        if !self.diagnostics.is_clean() {
            let _ = writeln!(out);
            let _ = writeln!(out, "Protocol diagnostics: {:?}", self.diagnostics);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Wall clock: {:.3} s", self.wall_secs);
        out
    }

    /// Line-delimited JSON records.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        let summary = serde_json::json!({
            "record": "summary",
            "end_clock": self.end_clock,
            "ending": self.ending,
            "wall_secs": self.wall_secs,
            "gvt_rounds": self.gvt_log.len(),
            "diagnostics": self.diagnostics,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        for p in &self.partitions {
            let rec = serde_json::json!({"record": "partition", "partition": p});
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out.push_str(&stats_records(&self.lp_stats));
        out
    }
}

/// One JSON line per process with its statistics.
pub fn stats_records(stats: &[LpStats]) -> String {
    let mut out = String::new();
    for (lp, s) in stats.iter().enumerate() {
        let rec = StatsRecord {
            record: "lp_stats".into(),
            lp: lp as LpId,
            stats: *s,
        };
        out.push_str(&serde_json::to_string(&rec).expect("stats serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub record: String,
    pub lp: LpId,
    #[serde(flatten)]
    pub stats: LpStats,
}

pub const ROW_COMMITTED: &str = "Total committed Transaction moves";
pub const ROW_ROLLED_BACK: &str = "Total Transaction moves rolled back";
pub const ROW_TOTAL: &str = "Total simulated Transaction moves";

/// Table with one column per process and the three move rows.
pub fn render_stats_table(names: &[&str], stats: &[LpStats]) -> String {
    let columns: Vec<(String, &LpStats)> = names
        .iter()
        .zip(stats)
        .map(|(n, s)| (n.to_string(), s))
        .collect();
    render_table(&columns)
}

/// Row label and the statistic it shows.
type Row = (&'static str, fn(&LpStats) -> u64);

/// The three move rows with one labelled column per statistics set.
pub fn render_table(columns: &[(String, &LpStats)]) -> String {
    let label_w = ROW_ROLLED_BACK
        .len()
        .max(ROW_COMMITTED.len())
        .max(ROW_TOTAL.len());
    let col_w = columns
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max(10);
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "LP statistic item");
    for (n, _) in columns {
        let _ = write!(out, "  {n:>col_w$}");
    }
    out.push('\n');
    let rows: [Row; 3] = [
        (ROW_COMMITTED, |s| s.moves_committed),
        (ROW_ROLLED_BACK, |s| s.moves_rolled_back),
        (ROW_TOTAL, |s| s.moves_executed),
    ];
    for (label, get) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (_, s) in columns {
            let _ = write!(out, "  {:>col_w$}", get(s));
        }
        out.push('\n');
    }
    out
}

/// Merges the synchronised process states into the final report.
pub fn assemble_report(
    model: &Model,
    end: MovePos,
    reports: &[LpEndReport],
    gvt_log: &[GvtSample],
    wall_secs: f64,
) -> FinalReport {
    let mut diagnostics = Diagnostics::default();
    for r in reports {
        diagnostics.absorb(&r.diagnostics);
    }
    FinalReport {
        partitions: reports
            .iter()
            .map(|r| PartitionReport {
                name: model.partitions[r.lp as usize].name.clone(),
                counter: r.counter,
                entry_counts: r.entry_counts.clone(),
            })
            .collect(),
        end_clock: end.key.time,
        ending: end,
        lp_stats: reports.iter().map(|r| r.stats).collect(),
        diagnostics,
        gvt_log: gvt_log.to_vec(),
        actuator_traces: reports.iter().map(|r| r.actuator_trace.clone()).collect(),
        end_states: reports.iter().map(|r| r.canonical_state.clone()).collect(),
        wall_secs,
    }
}
