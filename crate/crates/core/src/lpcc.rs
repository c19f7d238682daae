//! Per-process optimism control.
//!
//! Sensors are sampled from the logical process over an observation interval
//! and turned into an indicator vector (rates rescaled by their running
//! maxima) plus a performance figure, committed moves per wall second. The
//! vectors are kept as a bounded set of clusters; each cluster remembers the
//! best performance seen while the process was in that region and the
//! actuator that was in force. When a cluster close to the current state
//! promises clearly better performance, its actuator is adopted.
//!
//! The actuator limits the number of uncommitted moves. Exceeding it puts the
//! process into cancelback mode until enough of its history is committed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kernel::SimTime;

pub const INDICATOR_DIM: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpccConfig {
    /// Evaluate after this many executed moves (and on every GVT).
    pub eval_every_moves: u64,
    pub merge_radius: f64,
    pub capacity: usize,
    /// A cluster qualifies when its best performance exceeds the current one
    /// by this factor.
    pub improvement_margin: f64,
    /// Cancelback mode ends once uncommitted moves drop to `limit * hysteresis`.
    pub hysteresis: f64,
    pub floor: u64,
    pub ceiling: u64,
}

impl Default for LpccConfig {
    fn default() -> Self {
        LpccConfig {
            eval_every_moves: 200,
            merge_radius: 0.15,
            capacity: 64,
            improvement_margin: 1.05,
            hysteresis: 0.8,
            floor: 16,
            ceiling: 1 << 20,
        }
    }
}

/// Limit on uncommitted moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Actuator {
    Unlimited,
    Bounded(u64),
}

impl fmt::Display for Actuator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actuator::Unlimited => f.write_str("unlimited"),
            Actuator::Bounded(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Actuator {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "unlimited" {
            Ok(Actuator::Unlimited)
        } else {
            s.parse().map(Actuator::Bounded)
        }
    }
}

/// Cumulative counters and current levels read from a logical process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorTotals {
    pub moves_executed: u64,
    pub moves_committed: u64,
    pub moves_rolled_back: u64,
    pub rollbacks: u64,
    pub transactions_sent: u64,
    pub transactions_received: u64,
    pub anti_sent: u64,
    pub anti_received: u64,
    pub cancelbacks_received: u64,
    pub lvt: SimTime,
    pub gvt: SimTime,
    pub uncommitted: u64,
    pub state_list_size: u64,
}

/// Sensor values over one observation interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorSnapshot {
    pub wall_secs: f64,
    pub moves_executed: u64,
    pub moves_committed: u64,
    pub moves_rolled_back: u64,
    pub rollbacks: u64,
    pub transactions_sent: u64,
    pub transactions_received: u64,
    pub anti_sent: u64,
    pub anti_received: u64,
    pub cancelbacks_received: u64,
    pub uncommitted: u64,
    pub lvt_advance: u64,
    pub gvt_advance: u64,
    pub state_list_size: u64,
}

impl SensorSnapshot {
    pub fn between(prev: &SensorTotals, now: &SensorTotals, wall_secs: f64) -> Self {
        SensorSnapshot {
            wall_secs,
            moves_executed: now.moves_executed - prev.moves_executed,
            moves_committed: now.moves_committed - prev.moves_committed,
            moves_rolled_back: now.moves_rolled_back - prev.moves_rolled_back,
            rollbacks: now.rollbacks - prev.rollbacks,
            transactions_sent: now.transactions_sent - prev.transactions_sent,
            transactions_received: now.transactions_received - prev.transactions_received,
            anti_sent: now.anti_sent - prev.anti_sent,
            anti_received: now.anti_received - prev.anti_received,
            cancelbacks_received: now.cancelbacks_received - prev.cancelbacks_received,
            uncommitted: now.uncommitted,
            lvt_advance: now.lvt.saturating_sub(prev.lvt),
            gvt_advance: now.gvt.saturating_sub(prev.gvt),
            state_list_size: now.state_list_size,
        }
    }

    /// Raw indicator values: counters as per-second rates, levels as is.
    fn raw(&self) -> [f64; INDICATOR_DIM] {
        let w = self.wall_secs;
        [
            self.moves_executed as f64 / w,
            self.moves_committed as f64 / w,
            self.moves_rolled_back as f64 / w,
            self.rollbacks as f64 / w,
            self.transactions_sent as f64 / w,
            self.transactions_received as f64 / w,
            self.anti_sent as f64 / w,
            self.anti_received as f64 / w,
            self.cancelbacks_received as f64 / w,
            self.uncommitted as f64,
            self.lvt_advance as f64 / w,
            self.gvt_advance as f64 / w,
            self.state_list_size as f64,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningMaxima(pub [f64; INDICATOR_DIM]);

impl Default for RunningMaxima {
    fn default() -> Self {
        RunningMaxima([0.0; INDICATOR_DIM])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVector {
    pub components: [f64; INDICATOR_DIM],
    /// Committed moves per wall second.
    pub performance: f64,
}

impl IndicatorVector {
    pub fn distance(&self, other: &[f64; INDICATOR_DIM]) -> f64 {
        euclid(&self.components, other)
    }
}

fn euclid(a: &[f64; INDICATOR_DIM], b: &[f64; INDICATOR_DIM]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Converts a snapshot to indicators, updating the running maxima first.
pub fn make_indicators(s: &SensorSnapshot, maxima: &mut RunningMaxima) -> IndicatorVector {
    assert!(
        s.wall_secs > 0.0,
        "observation interval must have positive length"
    );
    let raw = s.raw();
    let mut components = [0.0; INDICATOR_DIM];
    for i in 0..INDICATOR_DIM {
        if raw[i] > maxima.0[i] {
            maxima.0[i] = raw[i];
        }
        components[i] = if maxima.0[i] > 0.0 {
            raw[i] / maxima.0[i]
        } else {
            0.0
        };
    }
    IndicatorVector {
        components,
        performance: s.moves_committed as f64 / s.wall_secs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterCentroid {
    pub centroid: [f64; INDICATOR_DIM],
    pub members: u64,
    pub best_performance: f64,
    pub best_actuator: Actuator,
}

/// Clustered history of visited states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub centroids: Vec<ClusterCentroid>,
    pub capacity: usize,
    pub merge_radius: f64,
}

impl History {
    pub fn new(capacity: usize, merge_radius: f64) -> Self {
        assert!(capacity >= 1);
        History {
            centroids: Vec::new(),
            capacity,
            merge_radius,
        }
    }

    fn nearest(&self, v: &[f64; INDICATOR_DIM]) -> Option<(usize, f64)> {
        self.centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (i, euclid(&c.centroid, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Adds `v`, observed while `actuator` was in force.
    pub fn observe(&mut self, v: &IndicatorVector, actuator: Actuator) {
        if let Some((i, d)) = self.nearest(&v.components) {
            if d <= self.merge_radius {
                let c = &mut self.centroids[i];
                let n = c.members as f64;
                for (m, x) in c.centroid.iter_mut().zip(&v.components) {
                    *m = (*m * n + x) / (n + 1.0);
                }
                c.members += 1;
                if v.performance > c.best_performance {
                    c.best_performance = v.performance;
                    c.best_actuator = actuator;
                }
                return;
            }
        }
        if self.centroids.len() >= self.capacity {
            self.merge_closest_pair();
        }
        self.centroids.push(ClusterCentroid {
            centroid: v.components,
            members: 1,
            best_performance: v.performance,
            best_actuator: actuator,
        });
    }

    fn merge_closest_pair(&mut self) {
        if self.centroids.len() < 2 {
            self.centroids.clear();
            return;
        }
        let mut best = (0, 1, f64::INFINITY);
        for i in 0..self.centroids.len() {
            for j in i + 1..self.centroids.len() {
                let d = euclid(&self.centroids[i].centroid, &self.centroids[j].centroid);
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (i, j, _) = best;
        let b = self.centroids.swap_remove(j);
        let a = &mut self.centroids[i];
        let (na, nb) = (a.members as f64, b.members as f64);
        for (x, y) in a.centroid.iter_mut().zip(&b.centroid) {
            *x = (*x * na + y * nb) / (na + nb);
        }
        a.members += b.members;
        if b.best_performance > a.best_performance {
            a.best_performance = b.best_performance;
            a.best_actuator = b.best_actuator;
        }
    }

    /// Actuator of the nearest cluster whose best performance beats
    /// `performance * margin`, or `current` when none does.
    pub fn propose_actuator(
        &self,
        v: &IndicatorVector,
        performance: f64,
        margin: f64,
        current: Actuator,
    ) -> Actuator {
        self.centroids
            .iter()
            .filter(|c| c.best_performance > performance * margin)
            .map(|c| (c, euclid(&c.centroid, &v.components)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(current, |(c, _)| c.best_actuator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowDecision {
    Normal,
    EnterCancelback,
}

pub fn check_window(uncommitted: u64, actuator: Actuator) -> WindowDecision {
    match actuator {
        Actuator::Bounded(limit) if uncommitted > limit => WindowDecision::EnterCancelback,
        _ => WindowDecision::Normal,
    }
}

/// Whether a process in cancelback mode may resume.
pub fn may_leave_cancelback(uncommitted: u64, actuator: Actuator, hysteresis: f64) -> bool {
    match actuator {
        Actuator::Unlimited => true,
        Actuator::Bounded(limit) => (uncommitted as f64) <= limit as f64 * hysteresis,
    }
}

/// One row of the actuator trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSample {
    pub wall_ms: f64,
    pub gvt_time: SimTime,
    pub actuator: Actuator,
    pub uncommitted: u64,
}

pub const ACTUATOR_CSV_HEADER: &str = "wall_ms,gvt_time,actuator,uncommitted";

impl ActuatorSample {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.wall_ms, self.gvt_time, self.actuator, self.uncommitted
        )
    }

    pub fn parse_csv_row(row: &str) -> Option<Self> {
        let mut it = row.split(',');
        let sample = ActuatorSample {
            wall_ms: it.next()?.parse().ok()?,
            gvt_time: it.next()?.parse().ok()?,
            actuator: it.next()?.parse().ok()?,
            uncommitted: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(sample)
    }
}

/// The control component owned by one logical process.
#[derive(Debug, Clone)]
pub struct Lpcc {
    pub config: LpccConfig,
    maxima: RunningMaxima,
    history: History,
    actuator: Actuator,
    last: Option<(SensorTotals, f64)>,
    trace: Vec<ActuatorSample>,
}

impl Lpcc {
    pub fn new(config: LpccConfig) -> Self {
        Lpcc {
            config,
            maxima: RunningMaxima::default(),
            history: History::new(config.capacity, config.merge_radius),
            actuator: Actuator::Unlimited,
            last: None,
            trace: Vec::new(),
        }
    }

    pub fn actuator(&self) -> Actuator {
        self.actuator
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn trace(&self) -> &[ActuatorSample] {
        &self.trace
    }

    fn clamp(&self, n: u64) -> u64 {
        n.clamp(self.config.floor, self.config.ceiling)
    }

    /// Starts a fresh observation interval without evaluating, e.g. when the
    /// process resumes after a pause.
    pub fn restart_interval(&mut self, totals: SensorTotals, now_secs: f64) {
        self.last = Some((totals, now_secs));
    }

    /// Closes the current observation interval and updates the actuator.
    pub fn evaluate(&mut self, totals: SensorTotals, now_secs: f64) -> Actuator {
        let Some((prev, since)) = self.last.replace((totals, now_secs)) else {
            return self.actuator;
        };
        let wall = now_secs - since;
        if wall <= 0.0 {
            self.last = Some((prev, since));
            return self.actuator;
        }
        let snapshot = SensorSnapshot::between(&prev, &totals, wall);
        let v = make_indicators(&snapshot, &mut self.maxima);
        // an unlimited actuator is remembered as the uncommitted level it
        // left once the interval's commits were applied
        let in_force = match self.actuator {
            Actuator::Unlimited => Actuator::Bounded(self.clamp(totals.uncommitted)),
            bounded => bounded,
        };
        self.history.observe(&v, in_force);
        let proposed = self.history.propose_actuator(
            &v,
            v.performance,
            self.config.improvement_margin,
            self.actuator,
        );
        self.actuator = match proposed {
            Actuator::Bounded(n) => Actuator::Bounded(self.clamp(n)),
            Actuator::Unlimited => Actuator::Unlimited,
        };
        self.trace.push(ActuatorSample {
            wall_ms: now_secs * 1000.0,
            gvt_time: totals.gvt,
            actuator: self.actuator,
            uncommitted: totals.uncommitted,
        });
        self.actuator
    }
}
