#![allow(dead_code)]

use std::fmt::Write as _;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng as _, SeedableRng};

use gpss_warp::kernel::{run_sequential, Rng, SequentialRun, DEFAULT_MOVE_BUDGET};
use gpss_warp::lpcc::LpccConfig;
use gpss_warp::model::{parse_str, Model};
use gpss_warp::transport::{
    run_parallel, DeterministicOptions, ParallelConfig, RunError, RunOutput, TransportMode,
};

pub const MODEL_A: &str = include_str!("../../models/model_a.gps");
pub const MODEL_B: &str = include_str!("../../models/model_b.gps");
pub const LOOP: &str = include_str!("../../models/loop.gps");

pub fn model(origin: &str, src: &str) -> Arc<Model> {
    Arc::new(parse_str(origin, src).unwrap_or_else(|e| panic!("{origin}: {e}\n{src}")))
}

/// A small random model: every partition generates, sends a share of its
/// transactions to another partition's entry and terminates the rest. Entries
/// may bounce a transaction on to a third partition at the same time.
pub fn random_model(seed: u64) -> String {
    let mut r = StdRng::seed_from_u64(seed);
    let n = r.gen_range(2..=3);
    let mut src = format!("* random model {seed}\n");
    for i in 0..n {
        let other = |r: &mut StdRng| (i + r.gen_range(1..n)) % n;
        let mean = r.gen_range(1..=8u64);
        let spread = r.gen_range(0..mean);
        let _ = writeln!(src, "PARTITION P{i},{}", r.gen_range(20..=150));
        if r.gen_bool(0.3) {
            let _ = writeln!(src, "GENERATE {mean},{spread},{}", r.gen_range(0..=20));
        } else {
            let _ = writeln!(src, "GENERATE {mean},{spread}");
        }
        let _ = writeln!(src, "TRANSFER 0.{},E{}", r.gen_range(1..=9), other(&mut r));
        if r.gen_bool(0.5) {
            let _ = writeln!(
                src,
                "E{i} TRANSFER 0.{},E{}",
                r.gen_range(1..=5),
                other(&mut r)
            );
            let _ = writeln!(src, "TERMINATE {}", r.gen_range(1..=2));
        } else {
            let _ = writeln!(src, "E{i} TERMINATE {}", r.gen_range(1..=2));
        }
    }
    src
}

pub fn deterministic(interleave_seed: u64, lpcc: bool) -> ParallelConfig {
    let mut config = ParallelConfig {
        transport: TransportMode::Deterministic(DeterministicOptions {
            interleave_seed,
            ..DeterministicOptions::default()
        }),
        ..ParallelConfig::default()
    };
    if lpcc {
        config.lp.lpcc = Some(LpccConfig::default());
    }
    config
}

pub fn sequential(m: &Model, seed: u64) -> SequentialRun {
    run_sequential(m, Rng::new(seed), DEFAULT_MOVE_BUDGET).unwrap()
}

pub fn parallel(m: &Arc<Model>, seed: u64, config: &ParallelConfig) -> Result<RunOutput, RunError> {
    run_parallel(m.clone(), Rng::new(seed), config)
}

/// Everything that has to hold for a finished parallel run, as a list of
/// failures (empty when the run is correct).
pub fn check_run(seq: &SequentialRun, out: &RunOutput) -> Vec<String> {
    let mut bad = Vec::new();
    let r = &out.report;
    if r.end_state() != seq.end {
        bad.push(format!(
            "end state {:?} != sequential {:?}",
            r.end_state(),
            seq.end
        ));
    }
    let states: Vec<String> = seq.states.iter().map(|s| s.canonical()).collect();
    if r.end_states != states {
        bad.push("synchronised partition states differ from the sequential ones".into());
    }
    for (i, s) in r.lp_stats.iter().enumerate() {
        if s.moves_executed != s.moves_committed + s.moves_rolled_back + s.moves_discarded_at_end {
            bad.push(format!("lp{i} accounting: {s:?}"));
        }
    }
    if r.gvt_log.windows(2).any(|w| w[1].gvt < w[0].gvt) {
        bad.push("GVT log decreases".into());
    }
    if !out.safety.is_clean() {
        bad.push(format!("safety {:?}", out.safety));
    }
    if !r.diagnostics.is_clean() {
        bad.push(format!("diagnostics {:?}", r.diagnostics));
    }
    bad
}
