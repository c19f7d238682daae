mod common;

use std::sync::Arc;

use common::*;
use gpss_warp::kernel::Rng;
use gpss_warp::model::Model;
use gpss_warp::sync::Horizon;
use gpss_warp::timewarp::Cancellation;
use gpss_warp::transport::{
    run_parallel, DeterministicOptions, ParallelConfig, RunError, TransportMode,
};

fn assert_correct(m: &Arc<Model>, seed: u64, config: &ParallelConfig) {
    let seq = sequential(m, seed);
    let out = parallel(m, seed, config).unwrap();
    let bad = check_run(&seq, &out);
    assert!(bad.is_empty(), "seed {seed}: {bad:#?}");
}

#[test]
fn bundled_models_match_the_oracle() {
    for (name, src) in [("model_a", MODEL_A), ("model_b", MODEL_B), ("loop", LOOP)] {
        let m = model(name, src);
        for lpcc in [false, true] {
            assert_correct(&m, 3, &deterministic(1, lpcc));
        }
    }
}

#[test]
fn random_models_match_the_oracle() {
    for k in 0..8 {
        let m = model("random", &random_model(k));
        for seed in 1..=2 {
            assert_correct(&m, seed, &deterministic(seed + 10, k % 2 == 0));
        }
    }
}

#[test]
fn same_seeds_same_run() {
    let m = model("model_b", MODEL_B);
    let config = deterministic(4, true);
    let a = parallel(&m, 9, &config).unwrap();
    let b = parallel(&m, 9, &config).unwrap();
    assert_eq!(a.report.lp_stats, b.report.lp_stats);
    assert_eq!(a.report.gvt_log, b.report.gvt_log);
    assert_eq!(a.report.actuator_traces, b.report.actuator_traces);
}

#[test]
fn interleavings_differ_but_end_states_agree() {
    let m = model("model_a", MODEL_A);
    let runs: Vec<_> = (0..4)
        .map(|i| parallel(&m, 5, &deterministic(i, false)).unwrap())
        .collect();
    let seq = sequential(&m, 5);
    for r in &runs {
        assert!(check_run(&seq, r).is_empty());
    }
    assert!(runs
        .windows(2)
        .any(|w| w[0].report.lp_stats != w[1].report.lp_stats));
}

#[test]
fn slow_channel_and_stalled_process() {
    let m = model("model_b", MODEL_B);
    let options = DeterministicOptions {
        interleave_seed: 2,
        channel_delays: vec![((0, 1), 40)],
        stall: Some((1, 500)),
        ..DeterministicOptions::default()
    };
    let config = ParallelConfig {
        transport: TransportMode::Deterministic(options),
        ..ParallelConfig::default()
    };
    assert_correct(&m, 1, &config);
}

#[test]
fn sparse_checkpoints() {
    let m = model("model_a", MODEL_A);
    for interval in [3, 16] {
        let mut config = deterministic(7, false);
        config.lp.checkpoint_interval = interval;
        assert_correct(&m, 2, &config);
    }
}

#[test]
fn concurrent_runner_matches_the_oracle() {
    for (name, src) in [("model_b", MODEL_B), ("loop", LOOP)] {
        let m = model(name, src);
        let config = ParallelConfig {
            transport: TransportMode::Concurrent,
            gvt_period_ms: 5.0,
            ..ParallelConfig::default()
        };
        assert_correct(&m, 4, &config);
    }
}

#[test]
fn aggressive_cancellation_livelocks_on_the_zero_time_loop() {
    let m = model("loop", LOOP);
    let lazy = parallel(&m, 1, &deterministic(1, false)).unwrap();
    let used: u64 = lazy
        .report
        .lp_stats
        .iter()
        .map(|s| s.moves_executed + s.coast_forward_moves)
        .sum();

    let mut config = deterministic(1, false);
    config.lp.cancellation = Cancellation::Aggressive;
    config.move_budget = 100 * used.max(100);
    match run_parallel(m, Rng::new(1), &config) {
        Err(RunError::BudgetExceeded { stats, .. }) => {
            assert!(stats.iter().map(|s| s.anti_sent).sum::<u64>() > 0);
        }
        other => panic!("expected the budget to run out, got {other:?}"),
    }
}

#[test]
fn budget_exhaustion_reports_partial_stats() {
    let m = model("model_a", MODEL_A);
    let mut config = deterministic(1, false);
    config.move_budget = 1000;
    match parallel(&m, 1, &config) {
        Err(RunError::BudgetExceeded { budget, stats }) => {
            assert_eq!(budget, 1000);
            assert_eq!(stats.len(), 2);
            assert!(stats.iter().map(|s| s.moves_executed).sum::<u64>() >= 1000);
        }
        other => panic!("expected the budget to run out, got {other:?}"),
    }
}

#[test]
fn gvt_reaches_the_end() {
    let m = model("model_b", MODEL_B);
    let out = parallel(&m, 1, &deterministic(1, false)).unwrap();
    let last = out.report.gvt_log.last().unwrap().gvt;
    assert!(last > Horizon::Key(out.report.ending.key));
}
