//! Single-context scheduler. A run is a pure function of the model, the
//! simulation seed and the interleaving seed.
//!
//! Time advances in ticks. Each tick delivers the envelopes due, then lets
//! every process take one or more steps in a shuffled order. Envelopes are
//! delayed by a per-channel base delay plus seeded jitter, never overtaking
//! earlier envelopes on the same channel. A virtual clock charges every move
//! and message to one simulated processor; it stands in for wall time, so the
//! GVT period and the optimism controller behave reproducibly.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use crate::kernel::Rng;
use crate::model::Model;
use crate::sync::{ControlAction, Controller, Horizon};
use crate::timewarp::{LogicalProcess, LpId, LpMessage, LpStats};

use super::{
    broadcast_payload, collect_outbox, controller_deliver, lp_deliver, work_moves, ControllerEvent,
    Endpoint, Envelope, ParallelConfig, Payload, RunError, RunOutput, SafetyLog,
};

/// Virtual cost of the work done by the processes, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub move_us: f64,
    pub message_us: f64,
    pub step_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            move_us: 20.0,
            message_us: 5.0,
            step_us: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicOptions {
    pub interleave_seed: u64,
    /// Extra delay drawn uniformly from `0..=max_jitter` ticks per envelope.
    pub max_jitter: u64,
    /// Fixed extra delay in ticks for process-to-process channels.
    pub channel_delays: Vec<((LpId, LpId), u64)>,
    /// Each process takes `1..=1+extra_steps` steps per tick.
    pub extra_steps: u32,
    /// Keep one process from stepping for this many ticks.
    pub stall: Option<(LpId, u64)>,
    pub cost: CostModel,
}

impl Default for DeterministicOptions {
    fn default() -> Self {
        DeterministicOptions {
            interleave_seed: 0,
            max_jitter: 2,
            channel_delays: Vec::new(),
            extra_steps: 1,
            stall: None,
            cost: CostModel::default(),
        }
    }
}

struct Network {
    rng: StdRng,
    jitter: u64,
    delays: HashMap<(LpId, LpId), u64>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    in_flight: HashMap<u64, Envelope>,
    next_global: u64,
    next_seq: HashMap<(Endpoint, Endpoint), u64>,
    expected_seq: HashMap<(Endpoint, Endpoint), u64>,
    last_due: HashMap<(Endpoint, Endpoint), u64>,
    trace: bool,
}

impl Network {
    fn send(&mut self, tick: u64, src: Endpoint, dst: Endpoint, payload: Payload) {
        let chan = (src, dst);
        let seq = self.next_seq.entry(chan).or_insert(0);
        let env = Envelope {
            src,
            dst,
            seq: *seq,
            payload,
        };
        *seq += 1;
        let base = match (src, dst) {
            (Endpoint::Lp(a), Endpoint::Lp(b)) => self.delays.get(&(a, b)).copied().unwrap_or(0),
            _ => 0,
        };
        let jitter = if self.jitter > 0 {
            self.rng.gen_range(0..=self.jitter)
        } else {
            0
        };
        let last = self.last_due.entry(chan).or_insert(0);
        let due = (tick + 1 + base + jitter).max(*last);
        *last = due;
        if self.trace {
            log::trace!("send t={tick} due={due} {env:?}");
        }
        let g = self.next_global;
        self.next_global += 1;
        self.queue.push(Reverse((due, g)));
        self.in_flight.insert(g, env);
    }

    fn pop_due(&mut self, tick: u64) -> Option<Envelope> {
        let &Reverse((due, g)) = self.queue.peek()?;
        if due > tick {
            return None;
        }
        self.queue.pop();
        self.in_flight.remove(&g)
    }
}

fn charge(cost: &CostModel, before: &[LpStats], lps: &[LogicalProcess]) -> f64 {
    let mut us = 0.0;
    for (b, lp) in before.iter().zip(lps) {
        let a = lp.stats();
        us += (work_moves(a) - work_moves(b)) as f64 * cost.move_us;
        let msgs = |s: &LpStats| {
            s.transactions_sent
                + s.transactions_received
                + s.anti_sent
                + s.anti_received
                + s.cancelbacks_sent
                + s.cancelbacks_received
        };
        us += (msgs(a) - msgs(b)) as f64 * cost.message_us;
        us += cost.step_us;
    }
    us
}

pub fn run_deterministic(
    model: Arc<Model>,
    rng: Rng,
    config: &ParallelConfig,
    opts: &DeterministicOptions,
) -> Result<RunOutput, RunError> {
    let n = model.partition_count();
    let mut lps: Vec<LogicalProcess> = (0..n as LpId)
        .map(|i| LogicalProcess::new(i, model.clone(), rng, config.lp))
        .collect();
    let mut controller = Controller::new(n);
    let mut net = Network {
        rng: StdRng::seed_from_u64(opts.interleave_seed),
        jitter: opts.max_jitter,
        delays: opts.channel_delays.iter().copied().collect(),
        queue: BinaryHeap::new(),
        in_flight: HashMap::new(),
        next_global: 0,
        next_seq: HashMap::new(),
        expected_seq: HashMap::new(),
        last_due: HashMap::new(),
        trace: config.trace_envelopes,
    };
    let mut safety = SafetyLog::default();
    let mut published: Option<Horizon> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut out: Vec<(Endpoint, Payload)> = Vec::new();
    let mut tick = 0u64;
    let mut now_us = 0.0f64;
    let period_us = config.gvt_period_ms * 1000.0;
    let mut next_round_us = period_us;

    let lp_err = |lp: usize| {
        move |source| RunError::Lp {
            lp: lp as LpId,
            source,
        }
    };

    loop {
        tick += 1;
        let before: Vec<LpStats> = lps.iter().map(|l| *l.stats()).collect();
        let now = now_us / 1e6;

        while let Some(env) = net.pop_due(tick) {
            if net.trace {
                log::trace!("deliver t={tick} {env:?}");
            }
            let expected = net.expected_seq.entry((env.src, env.dst)).or_insert(0);
            if env.seq != *expected {
                safety.fifo_violations += 1;
            }
            *expected = env.seq + 1;
            match env.dst {
                Endpoint::Lp(i) => {
                    if let Payload::Message(LpMessage::Transaction { txn, .. }) = &env.payload {
                        if published.is_some_and(|g| g.passed(txn.key())) {
                            safety.deliveries_below_gvt += 1;
                        }
                    }
                    let lp = &mut lps[i as usize];
                    lp_deliver(lp, env.src, env.payload, now, &mut out)
                        .map_err(lp_err(i as usize))?;
                    dispatch(
                        &mut net,
                        &mut safety,
                        published,
                        tick,
                        Endpoint::Lp(i),
                        &mut out,
                    );
                }
                Endpoint::Controller => {
                    let actions = match controller_deliver(&mut controller, env.payload) {
                        ControllerEvent::AllEnded => {
                            let report = controller
                                .finish(&model, now)
                                .expect("end confirmed before processes report");
                            return Ok(RunOutput {
                                report,
                                safety,
                                gvt_retries: controller.retries(),
                            });
                        }
                        ControllerEvent::Requested => {
                            controller.start_round().into_iter().collect()
                        }
                        ControllerEvent::Actions(a) => a,
                    };
                    for a in actions {
                        if let ControlAction::Result(r) = &a {
                            if published.is_some_and(|p| r.gvt < p) {
                                safety.gvt_regressions += 1;
                            }
                            published = Some(r.gvt);
                        }
                        let Some(p) = broadcast_payload(&a) else {
                            return Err(RunError::Drained);
                        };
                        for i in 0..n {
                            net.send(
                                tick,
                                Endpoint::Controller,
                                Endpoint::Lp(i as LpId),
                                p.clone(),
                            );
                        }
                    }
                }
            }
        }

        order.shuffle(&mut net.rng);
        for &i in &order {
            if opts
                .stall
                .is_some_and(|(lp, until)| lp as usize == i && tick <= until)
            {
                continue;
            }
            let steps = 1 + net.rng.gen_range(0..=opts.extra_steps);
            for _ in 0..steps {
                lps[i].step(now).map_err(lp_err(i))?;
                collect_outbox(&mut lps[i], &mut out);
                dispatch(
                    &mut net,
                    &mut safety,
                    published,
                    tick,
                    Endpoint::Lp(i as LpId),
                    &mut out,
                );
            }
        }

        now_us += charge(&opts.cost, &before, &lps);
        if now_us >= next_round_us {
            next_round_us = now_us + period_us;
            if let Some(ControlAction::Poll { round }) = controller.start_round() {
                for i in 0..n {
                    net.send(
                        tick,
                        Endpoint::Controller,
                        Endpoint::Lp(i as LpId),
                        Payload::GvtPoll { round },
                    );
                }
            }
        }

        let work: u64 = lps.iter().map(|l| work_moves(l.stats())).sum();
        if work > config.move_budget {
            return Err(RunError::BudgetExceeded {
                budget: config.move_budget,
                stats: lps.iter().map(|l| *l.stats()).collect(),
            });
        }
    }
}

fn dispatch(
    net: &mut Network,
    safety: &mut SafetyLog,
    published: Option<Horizon>,
    tick: u64,
    src: Endpoint,
    out: &mut Vec<(Endpoint, Payload)>,
) {
    for (dst, payload) in out.drain(..) {
        if let Payload::Message(LpMessage::Anti { key, .. }) = &payload {
            if published.is_some_and(|g| g.passed(*key)) {
                safety.antis_below_gvt += 1;
            }
        }
        net.send(tick, src, dst, payload);
    }
}
