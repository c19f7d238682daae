use serde::{Deserialize, Serialize};

/// Per-process counters. Every forward execution of a move counts once in
/// `moves_executed` and ends up in exactly one of committed, rolled back or
/// discarded at the end; re-executions while coasting forward from a
/// checkpoint are restorations and only show up in `coast_forward_moves`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LpStats {
    pub moves_executed: u64,
    pub moves_committed: u64,
    pub moves_rolled_back: u64,
    pub moves_discarded_at_end: u64,
    pub rollbacks: u64,
    pub coast_forward_moves: u64,
    pub transactions_sent: u64,
    pub transactions_received: u64,
    /// Regenerated sends matched against the output log and not resent.
    pub resends_suppressed: u64,
    pub anti_sent: u64,
    pub anti_received: u64,
    pub cancelbacks_sent: u64,
    pub cancelbacks_received: u64,
    pub cancelback_mode_entries: u64,
    pub checkpoints_taken: u64,
}

impl LpStats {
    /// Executed moves not yet committed, rolled back or discarded.
    pub fn uncommitted(&self) -> u64 {
        self.moves_executed
            - self.moves_committed
            - self.moves_rolled_back
            - self.moves_discarded_at_end
    }
}

/// Protocol violations observed by a process. All zero in a correct run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Messages received with a key below the process's known GVT.
    pub received_below_gvt: u64,
    /// Rollbacks whose target lay below the known GVT.
    pub rollbacks_below_gvt: u64,
    /// Anti-transactions emitted for a key below the known GVT.
    pub antis_below_gvt: u64,
    /// GVT results that went backwards.
    pub gvt_regressions: u64,
    /// Anti-transactions that never found their transaction.
    pub unmatched_antis: u64,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        *self == Diagnostics::default()
    }

    pub fn absorb(&mut self, o: &Diagnostics) {
        self.received_below_gvt += o.received_below_gvt;
        self.rollbacks_below_gvt += o.rollbacks_below_gvt;
        self.antis_below_gvt += o.antis_below_gvt;
        self.gvt_regressions += o.gvt_regressions;
        self.unmatched_antis += o.unmatched_antis;
    }
}
