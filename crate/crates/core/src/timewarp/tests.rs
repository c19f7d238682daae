use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::kernel::{Rng, Uid};
use crate::model::{parse_str, BlockRef};

const LOOP: &str = include_str!("../../models/loop.gps");
const MODEL_A: &str = include_str!("../../models/model_a.gps");
const MODEL_B: &str = include_str!("../../models/model_b.gps");

/// Partition1 ends after two terminations; Partition2 feeds it from time 1.
const FEEDER: &str = "\
PARTITION Partition1,2
GENERATE 1,0
L1 TERMINATE 1
PARTITION Partition2,100
GENERATE 5,0,1
TRANSFER 1.0,L1
";

fn model(src: &str) -> Arc<Model> {
    Arc::new(parse_str("test.gps", src).unwrap())
}

fn lp(m: &Arc<Model>, id: LpId, cancellation: Cancellation) -> LogicalProcess {
    let config = LpConfig {
        cancellation,
        ..LpConfig::default()
    };
    LogicalProcess::new(id, m.clone(), Rng::new(7), config)
}

fn transactions(out: Vec<(LpId, LpMessage)>) -> Vec<LpMessage> {
    out.into_iter()
        .map(|(_, m)| m)
        .filter(|m| matches!(m, LpMessage::Transaction { .. }))
        .collect()
}

fn count_antis(out: &[(LpId, LpMessage)]) -> usize {
    out.iter()
        .filter(|(_, m)| matches!(m, LpMessage::Anti { .. }))
        .count()
}

fn assert_accounted(lp: &LogicalProcess) {
    assert_eq!(lp.stats().uncommitted(), lp.uncommitted());
}

/// x1 and x2 leave for LP1, x1 comes straight back at the same key and
/// rolls LP0 back to just before x1.
fn zero_time_return(cancellation: Cancellation) -> (LogicalProcess, Vec<(LpId, LpMessage)>) {
    let m = model(LOOP);
    let mut lp0 = lp(&m, 0, cancellation);
    let mut lp1 = lp(&m, 1, cancellation);
    lp0.step(0.0).unwrap();
    lp0.step(0.0).unwrap();
    let sent = transactions(lp0.take_outbox());
    assert_eq!(sent.len(), 2);

    lp1.receive(0, sent[0].clone(), 0.0).unwrap();
    assert!(matches!(lp1.step(0.0).unwrap(), StepOutcome::Executed(_)));
    let back = transactions(lp1.take_outbox());
    assert_eq!(back.len(), 1);

    lp0.receive(1, back[0].clone(), 0.0).unwrap();
    assert_eq!(lp0.stats().rollbacks, 1);
    assert_eq!(lp0.stats().moves_rolled_back, 2);
    let out = lp0.take_outbox();
    (lp0, out)
}

#[test]
fn lazy_reexecution_sends_nothing_new() {
    let (mut lp0, out) = zero_time_return(Cancellation::Lazy);
    assert_eq!(count_antis(&out), 0);
    // x1 again, x1 returning, x2 again
    for _ in 0..3 {
        assert!(matches!(lp0.step(0.0).unwrap(), StepOutcome::Executed(_)));
    }
    assert!(lp0.take_outbox().is_empty());
    assert_eq!(lp0.stats().resends_suppressed, 2);
    assert_eq!(lp0.stats().anti_sent, 0);
    assert_eq!(lp0.state().counter, 19);
    assert_accounted(&lp0);
}

#[test]
fn aggressive_rollback_cancels_every_send() {
    let (mut lp0, out) = zero_time_return(Cancellation::Aggressive);
    assert_eq!(count_antis(&out), 2);
    lp0.step(0.0).unwrap();
    // the regenerated x1 is a new message
    let resent = transactions(lp0.take_outbox());
    assert_eq!(resent.len(), 1);
    assert_eq!(lp0.stats().resends_suppressed, 0);
}

#[test]
fn anti_for_pending_input_annihilates_silently() {
    let m = model(FEEDER);
    let mut feeder = lp(&m, 1, Cancellation::Lazy);
    feeder.step(0.0).unwrap();
    let msg = transactions(feeder.take_outbox()).remove(0);
    let LpMessage::Transaction { id, txn } = msg.clone() else {
        unreachable!()
    };

    let mut lp0 = lp(&m, 0, Cancellation::Lazy);
    let alone = lp0.next_pos();
    lp0.receive(1, msg, 0.0).unwrap();
    assert_eq!(lp0.next_pos(), alone.min(Some(txn.pos())));
    lp0.receive(
        1,
        LpMessage::Anti {
            id: MsgId { lp: 1, serial: 99 },
            target: id,
            key: txn.key(),
        },
        0.0,
    )
    .unwrap();
    assert_eq!(lp0.stats().rollbacks, 0);
    assert_eq!(lp0.next_pos(), alone);
    assert_eq!(lp0.local_min(), Horizon::of(alone.map(|p| p.key)));
}

#[test]
fn anti_for_processed_input_undoes_it() {
    let m = model(FEEDER);
    let mut feeder = lp(&m, 1, Cancellation::Lazy);
    feeder.step(0.0).unwrap();
    let msg = transactions(feeder.take_outbox()).remove(0);
    let LpMessage::Transaction { id, txn } = msg.clone() else {
        unreachable!()
    };

    let mut lp0 = lp(&m, 0, Cancellation::Lazy);
    lp0.receive(1, msg, 0.0).unwrap();
    // own arrival at time 1 sorts first (lower uid), then the input
    lp0.step(0.0).unwrap();
    let before = lp0.state().canonical();
    assert_eq!(
        lp0.step(0.0).unwrap(),
        StepOutcome::ProvisionalEndReached(txn.pos())
    );

    let anti = LpMessage::Anti {
        id: MsgId { lp: 1, serial: 99 },
        target: id,
        key: txn.key(),
    };
    lp0.receive(1, anti, 0.0).unwrap();
    assert_eq!(lp0.mode(), LpMode::Normal);
    assert_eq!(lp0.stats().moves_rolled_back, 1);
    assert_eq!(lp0.state().canonical(), before);
    assert_accounted(&lp0);
}

#[test]
fn anti_before_its_transaction_cancels_it_on_arrival() {
    let m = model(FEEDER);
    let mut lp0 = lp(&m, 0, Cancellation::Lazy);
    let mut feeder = lp(&m, 1, Cancellation::Lazy);
    feeder.step(0.0).unwrap();
    let msg = transactions(feeder.take_outbox()).remove(0);
    let LpMessage::Transaction { id, txn } = msg.clone() else {
        unreachable!()
    };
    let alone = lp0.next_pos();
    lp0.receive(
        1,
        LpMessage::Anti {
            id: MsgId { lp: 1, serial: 99 },
            target: id,
            key: txn.key(),
        },
        0.0,
    )
    .unwrap();
    lp0.receive(1, msg, 0.0).unwrap();
    assert_eq!(lp0.next_pos(), alone);
}

#[test]
fn provisional_end_enqueues_later_transactions() {
    let m = model(FEEDER);
    let mut feeder = lp(&m, 1, Cancellation::Lazy);
    feeder.step(0.0).unwrap();
    feeder.step(0.0).unwrap();
    let sent = transactions(feeder.take_outbox());
    let late = sent[1].clone();
    assert!(late.key().time > 2);

    let mut lp0 = lp(&m, 0, Cancellation::Lazy);
    lp0.step(0.0).unwrap();
    let end = match lp0.step(0.0).unwrap() {
        StepOutcome::ProvisionalEndReached(p) => p,
        other => panic!("expected the end, got {other:?}"),
    };
    lp0.receive(1, late, 0.0).unwrap();
    assert_eq!(lp0.mode(), LpMode::ProvisionalEnd(end));
    assert_eq!(lp0.step(0.0).unwrap(), StepOutcome::Idle);
    assert_eq!(lp0.stats().rollbacks, 0);
    assert_eq!(lp0.gvt_report(0).provisional_end, Some(end));
}

#[test]
fn straggler_reopens_provisional_end() {
    let m = model(FEEDER);
    let mut feeder = lp(&m, 1, Cancellation::Lazy);
    feeder.step(0.0).unwrap();
    let early = transactions(feeder.take_outbox()).remove(0);
    let pos = match &early {
        LpMessage::Transaction { txn, .. } => txn.pos(),
        _ => unreachable!(),
    };

    let mut lp0 = lp(&m, 0, Cancellation::Lazy);
    lp0.step(0.0).unwrap();
    assert!(matches!(
        lp0.step(0.0).unwrap(),
        StepOutcome::ProvisionalEndReached(_)
    ));
    lp0.receive(1, early, 0.0).unwrap();
    assert_eq!(lp0.mode(), LpMode::Normal);
    assert_eq!(lp0.stats().moves_rolled_back, 1);
    // the input now ends the partition instead
    assert_eq!(
        lp0.step(0.0).unwrap(),
        StepOutcome::ProvisionalEndReached(pos)
    );
    assert_eq!(lp0.mode(), LpMode::ProvisionalEnd(pos));
    assert_accounted(&lp0);
}

fn arrival_key(seq: u64) -> EventKey {
    EventKey {
        time: seq + 1,
        priority: 0,
        uid: Uid { partition: 0, seq },
    }
}

#[test]
fn commit_keeps_latest_checkpoint_below_gvt() {
    let m = model("PARTITION P,1000\nGENERATE 1,0\nTERMINATE 1\n");
    let config = LpConfig {
        checkpoint_interval: 2,
        ..LpConfig::default()
    };
    let mut p = LogicalProcess::new(0, m, Rng::new(1), config);
    for _ in 0..8 {
        p.step(0.0).unwrap();
    }
    // initial state plus after times 2, 4, 6, 8
    assert_eq!(p.checkpoint_count(), 5);

    let result = GvtResult {
        round: 1,
        gvt: Horizon::Key(arrival_key(6)),
        confirmed_end: None,
    };
    p.on_gvt(&result, 0.0).unwrap();
    assert_eq!(p.checkpoint_count(), 2);
    assert_eq!(p.stats().moves_committed, 6);
    assert_eq!(p.uncommitted(), 2);

    // same GVT again changes nothing
    let stats = *p.stats();
    p.on_gvt(&result, 0.0).unwrap();
    assert_eq!(*p.stats(), stats);

    // everything above GVT can still be undone
    let receipt = p.rollback(MovePos::first_at(arrival_key(6)), 0.0).unwrap();
    assert_eq!(receipt.undone, 2);
    assert_eq!(
        receipt.restored_from,
        Some(MovePos::first_at(arrival_key(5)))
    );
    assert_eq!(p.state().clock, 6);
    assert_accounted(&p);
}

#[test]
fn gvt_regression_is_an_error() {
    let m = model(MODEL_A);
    let mut p = lp(&m, 0, Cancellation::Lazy);
    let at = |seq| GvtResult {
        round: 0,
        gvt: Horizon::Key(arrival_key(seq)),
        confirmed_end: None,
    };
    p.on_gvt(&at(5), 0.0).unwrap();
    assert!(matches!(
        p.on_gvt(&at(3), 0.0),
        Err(LpError::GvtRegression { .. })
    ));
    assert_eq!(p.diagnostics().gvt_regressions, 1);
}

#[test]
fn end_sync_discards_moves_after_the_end() {
    let m = model(MODEL_A);
    let mut p = lp(&m, 0, Cancellation::Lazy);
    for _ in 0..10 {
        p.step(0.0).unwrap();
    }
    let report = p.end_sync(MovePos::first_at(arrival_key(5))).unwrap();
    assert_eq!(p.mode(), LpMode::Ended);
    assert_eq!(report.stats.moves_discarded_at_end, 4);
    assert_eq!(report.stats.moves_committed, 6);
    assert_eq!(p.state().clock, 6);
    assert_eq!(p.step(0.0).unwrap(), StepOutcome::Idle);
    assert_eq!(p.local_min(), Horizon::Infinity);
}

/// Receiving partition and the block cross-partition transactions enter.
const TARGETS: [(&str, LpId, u32); 3] = [(MODEL_A, 1, 1), (MODEL_B, 1, 1), (LOOP, 0, 2)];

fn input(target: (LpId, u32), uid: Uid, time: u64) -> Transaction {
    Transaction {
        uid,
        time,
        priority: 0,
        location: BlockRef {
            partition: target.0,
            block: target.1,
        },
        hop: 1,
        steps: 2,
        pending_generate: None,
    }
}

/// Runs up to `moves` moves, recording the canonical state at each frontier.
fn record(p: &mut LogicalProcess, moves: usize) -> BTreeMap<MovePos, (String, Option<MovePos>)> {
    let mut seen = BTreeMap::new();
    for _ in 0..moves {
        let Some(next) = p.next_pos() else { break };
        seen.insert(next, (p.state().canonical(), p.next_pos()));
        match p.step(0.0).unwrap() {
            StepOutcome::Executed(_) => {}
            _ => break,
        }
    }
    seen
}

fn check_rollback_exactness(
    which: usize,
    seed: u64,
    interval: u32,
    input_times: Vec<u64>,
    moves: usize,
    pick: usize,
    straggler_time: u64,
) -> Result<(), TestCaseError> {
    let (src, lp_id, block) = TARGETS[which];
    let m = model(src);
    let from = 1 - lp_id;
    let config = LpConfig {
        checkpoint_interval: interval,
        ..LpConfig::default()
    };
    let mut p = LogicalProcess::new(lp_id, m, Rng::new(seed), config);
    for (i, t) in input_times.iter().enumerate() {
        let txn = input(
            (lp_id, block),
            Uid {
                partition: from,
                seq: i as u64,
            },
            *t,
        );
        let msg = LpMessage::Transaction {
            id: MsgId {
                lp: from,
                serial: i as u64,
            },
            txn,
        };
        p.receive(from, msg, 0.0).unwrap();
    }
    let mut seen = record(&mut p, moves);
    prop_assume!(seen.len() >= 2);
    let executed: Vec<MovePos> = seen
        .keys()
        .copied()
        .filter(|k| Some(*k) <= p.last_executed())
        .collect();
    prop_assume!(!executed.is_empty());

    // direct rollback to a recorded frontier, then identical re-execution
    let k = executed[pick % executed.len()];
    p.rollback(k, 0.0).unwrap();
    prop_assert_eq!(&(p.state().canonical(), p.next_pos()), &seen[&k]);
    let again = record(&mut p, moves);
    for (pos, s) in &again {
        if let Some(orig) = seen.get(pos) {
            prop_assert_eq!(s, orig);
        }
    }
    seen.extend(again);
    prop_assert!(p.diagnostics().is_clean());

    // a straggler from the other partition
    let last = p.last_executed().unwrap();
    let t = 1 + straggler_time % last.key.time;
    let uid = Uid {
        partition: from,
        seq: 1_000_000,
    };
    let straggler = input((lp_id, block), uid, t);
    let bound = MovePos::first_at(straggler.key());
    let expect = seen
        .keys()
        .copied()
        .find(|k| *k >= bound && Some(*k) <= p.last_executed());
    let before = p.stats().rollbacks;
    let msg = LpMessage::Transaction {
        id: MsgId {
            lp: from,
            serial: 1_000_000,
        },
        txn: straggler.clone(),
    };
    p.receive(from, msg, 0.0).unwrap();
    if let Some(k) = expect {
        prop_assert_eq!(p.stats().rollbacks, before + 1);
        prop_assert_eq!(&p.state().canonical(), &seen[&k].0);
        prop_assert!(p.last_executed().is_none_or(|l| l < bound));
        prop_assert_eq!(p.next_pos(), seen[&k].1.min(Some(straggler.pos())));
    } else {
        prop_assert_eq!(p.stats().rollbacks, before);
    }
    prop_assert_eq!(p.stats().uncommitted(), p.uncommitted());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rollback_restores_recorded_state(
        which in 0usize..3,
        seed in any::<u64>(),
        interval in 1u32..8,
        input_times in prop::collection::vec(1u64..60, 0..15),
        moves in 2usize..80,
        pick in any::<usize>(),
        straggler_time in any::<u64>(),
    ) {
        check_rollback_exactness(which, seed, interval, input_times, moves, pick, straggler_time)?;
    }
}
