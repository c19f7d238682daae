//! One thread per process plus the controller on the calling thread, coupled
//! only by channels. Wall time drives the GVT period and the optimism
//! controller.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use crate::kernel::Rng;
use crate::model::Model;
use crate::sync::{ControlAction, Controller, Horizon};
use crate::timewarp::{LogicalProcess, LpError, LpId, LpStats, StepOutcome};

use super::{
    broadcast_payload, collect_outbox, controller_deliver, lp_deliver, work_moves, ControllerEvent,
    Endpoint, Envelope, ParallelConfig, Payload, RunError, RunOutput, SafetyLog,
};

/// Sending half of the mesh for one endpoint, numbering envelopes per channel.
struct Outlet {
    me: Endpoint,
    senders: Vec<Sender<Envelope>>,
    seq: Vec<u64>,
    trace: bool,
}

fn slot(e: Endpoint, n: usize) -> usize {
    match e {
        Endpoint::Lp(i) => i as usize,
        Endpoint::Controller => n,
    }
}

impl Outlet {
    fn send(&mut self, dst: Endpoint, payload: Payload) {
        let n = self.senders.len() - 1;
        let k = slot(dst, n);
        let env = Envelope {
            src: self.me,
            dst,
            seq: self.seq[k],
            payload,
        };
        self.seq[k] += 1;
        if self.trace {
            log::trace!("send {env:?}");
        }
        // a receiver that already finished no longer needs anything
        let _ = self.senders[k].send(env);
    }
}

/// Tracks per-source sequence numbers on the receiving side.
struct Inlet {
    expected: Vec<u64>,
    violations: u64,
}

impl Inlet {
    fn check(&mut self, env: &Envelope) {
        let n = self.expected.len() - 1;
        let k = slot(env.src, n);
        if env.seq != self.expected[k] {
            self.violations += 1;
        }
        self.expected[k] = env.seq + 1;
    }
}

/// Steps between voluntary yields. With fewer cores than threads a busy
/// process would otherwise hold the core for a whole time slice while the
/// controller waits to finish a GVT round.
const YIELD_EVERY: u64 = 16;

struct Shared {
    abort: AtomicBool,
    work: AtomicU64,
    budget: u64,
    start: Instant,
}

enum LpExit {
    Ended(LpStats, u64),
    Aborted(LpStats, u64),
}

fn lp_thread(
    mut lp: LogicalProcess,
    rx: Receiver<Envelope>,
    mut outlet: Outlet,
    shared: &Shared,
) -> Result<LpExit, LpError> {
    let n = outlet.senders.len() - 1;
    let mut inlet = Inlet {
        expected: vec![0; n + 1],
        violations: 0,
    };
    let mut out = Vec::new();
    let mut counted = 0u64;
    let mut steps = 0u64;
    let mut handle =
        |lp: &mut LogicalProcess, env: Envelope, outlet: &mut Outlet| -> Result<bool, LpError> {
            inlet.check(&env);
            let ended = matches!(env.payload, Payload::EndBarrier { .. });
            let now = shared.start.elapsed().as_secs_f64();
            lp_deliver(lp, env.src, env.payload, now, &mut out)?;
            for (dst, p) in out.drain(..) {
                outlet.send(dst, p);
            }
            Ok(ended)
        };
    loop {
        if shared.abort.load(Ordering::Relaxed) {
            return Ok(LpExit::Aborted(*lp.stats(), 0));
        }
        while let Ok(env) = rx.try_recv() {
            if handle(&mut lp, env, &mut outlet)? {
                return Ok(LpExit::Ended(*lp.stats(), inlet.violations));
            }
        }
        let outcome = lp.step(shared.start.elapsed().as_secs_f64())?;
        let mut sent = Vec::new();
        collect_outbox(&mut lp, &mut sent);
        for (dst, p) in sent {
            outlet.send(dst, p);
        }
        let w = work_moves(lp.stats());
        if w > counted {
            let total = shared.work.fetch_add(w - counted, Ordering::Relaxed) + (w - counted);
            counted = w;
            if total > shared.budget {
                shared.abort.store(true, Ordering::Relaxed);
            }
        }
        steps += 1;
        if steps.is_multiple_of(YIELD_EVERY) {
            thread::yield_now();
        }
        if outcome == StepOutcome::Idle {
            match rx.recv_timeout(Duration::from_millis(1)) {
                Ok(env) => {
                    if handle(&mut lp, env, &mut outlet)? {
                        return Ok(LpExit::Ended(*lp.stats(), inlet.violations));
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Ok(LpExit::Aborted(*lp.stats(), 0)),
            }
        }
    }
}

pub fn run_concurrent(
    model: Arc<Model>,
    rng: Rng,
    config: &ParallelConfig,
) -> Result<RunOutput, RunError> {
    let n = model.partition_count();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..=n).map(|_| unbounded::<Envelope>()).unzip();
    let shared = Shared {
        abort: AtomicBool::new(false),
        work: AtomicU64::new(0),
        budget: config.move_budget,
        start: Instant::now(),
    };
    let outlet = |me: Endpoint| Outlet {
        me,
        senders: senders.clone(),
        seq: vec![0; n + 1],
        trace: config.trace_envelopes,
    };
    let period = Duration::from_secs_f64(config.gvt_period_ms / 1000.0);

    thread::scope(|scope| {
        let mut handles = Vec::new();
        for (i, rx) in receivers.iter().take(n).enumerate() {
            let lp = LogicalProcess::new(i as LpId, model.clone(), rng, config.lp);
            let rx = rx.clone();
            let o = outlet(Endpoint::Lp(i as LpId));
            let shared = &shared;
            handles.push(scope.spawn(move || lp_thread(lp, rx, o, shared)));
        }

        let rx = &receivers[n];
        let mut out = outlet(Endpoint::Controller);
        let mut inlet = Inlet {
            expected: vec![0; n + 1],
            violations: 0,
        };
        let mut controller = Controller::new(n);
        let mut safety = SafetyLog::default();
        let mut published: Option<Horizon> = None;
        let mut next_round = Instant::now() + period;
        let broadcast = |out: &mut Outlet, a: &ControlAction| {
            if let Some(p) = broadcast_payload(a) {
                for i in 0..n {
                    out.send(Endpoint::Lp(i as LpId), p.clone());
                }
            }
        };

        let result: Result<Option<crate::sync::FinalReport>, RunError> = loop {
            if shared.abort.load(Ordering::Relaxed) {
                break Ok(None);
            }
            let wait = next_round.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(env) => {
                    inlet.check(&env);
                    let actions = match controller_deliver(&mut controller, env.payload) {
                        ControllerEvent::AllEnded => {
                            let wall = shared.start.elapsed().as_secs_f64();
                            break Ok(controller.finish(&model, wall));
                        }
                        ControllerEvent::Requested => {
                            controller.start_round().into_iter().collect()
                        }
                        ControllerEvent::Actions(a) => a,
                    };
                    for a in actions {
                        match &a {
                            ControlAction::Drained => {
                                shared.abort.store(true, Ordering::Relaxed);
                                break;
                            }
                            ControlAction::Result(r) => {
                                if published.is_some_and(|p| r.gvt < p) {
                                    safety.gvt_regressions += 1;
                                }
                                published = Some(r.gvt);
                            }
                            _ => {}
                        }
                        broadcast(&mut out, &a);
                    }
                    if shared.abort.load(Ordering::Relaxed) {
                        break Err(RunError::Drained);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    next_round = Instant::now() + period;
                    if let Some(a) = controller.start_round() {
                        broadcast(&mut out, &a);
                    }
                }
                Err(RecvTimeoutError::Disconnected) => break Ok(None),
            }
        };
        if !matches!(result, Ok(Some(_))) {
            shared.abort.store(true, Ordering::Relaxed);
        }

        let mut stats = Vec::new();
        let mut failure = None;
        for (i, h) in handles.into_iter().enumerate() {
            match h.join().expect("process thread panicked") {
                Ok(LpExit::Ended(s, v)) | Ok(LpExit::Aborted(s, v)) => {
                    safety.fifo_violations += v;
                    stats.push(s);
                }
                Err(source) => {
                    failure.get_or_insert(RunError::Lp {
                        lp: i as LpId,
                        source,
                    });
                }
            }
        }
        safety.fifo_violations += inlet.violations;
        if let Some(e) = failure {
            return Err(e);
        }
        match result? {
            Some(report) => Ok(RunOutput {
                report,
                safety,
                gvt_retries: controller.retries(),
            }),
            None => Err(RunError::BudgetExceeded {
                budget: config.move_budget,
                stats,
            }),
        }
    })
}
