//! Single-chain reference simulator. Its end state is the ground truth the
//! parallel engine has to reproduce.

use serde::{Deserialize, Serialize};

use crate::model::Model;

use super::{EngineState, EventKey, KernelError, MoveEnd, MoveOutcome, MovePos, Rng, SimTime};

/// Committed end state of a finished simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndState {
    /// Final termination counter per partition.
    pub counters: Vec<i64>,
    /// Entry count per partition and block.
    pub entry_counts: Vec<Vec<u64>>,
    pub end_clock: SimTime,
    /// Position of the move that ended the simulation.
    pub ending: MovePos,
}

impl EndState {
    pub fn ending_key(&self) -> EventKey {
        self.ending.key
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequentialRun {
    pub end: EndState,
    pub moves: u64,
    /// Per-partition engine state right after the ending move.
    pub states: Vec<EngineState>,
}

/// Stepping interface over the merged chain, used by [`run_sequential`] and
/// by tests that check invariants between moves.
#[derive(Debug, Clone)]
pub struct SequentialSim<'m> {
    model: &'m Model,
    rng: Rng,
    pub states: Vec<EngineState>,
    pub moves: u64,
    /// Transactions created so far (scheduled arrivals included).
    pub created: u64,
    pub destroyed: u64,
    pub last: Option<MovePos>,
}

impl<'m> SequentialSim<'m> {
    pub fn new(model: &'m Model, rng: Rng) -> Self {
        let states: Vec<EngineState> = (0..model.partition_count() as u32)
            .map(|p| EngineState::new(model, p, &rng))
            .collect();
        let created = states.iter().map(|s| s.chain.len() as u64).sum();
        SequentialSim {
            model,
            rng,
            states,
            moves: 0,
            created,
            destroyed: 0,
            last: None,
        }
    }

    pub fn pending(&self) -> u64 {
        self.states.iter().map(|s| s.chain.len() as u64).sum()
    }

    /// Executes the globally smallest pending move.
    pub fn step(&mut self) -> Result<MoveOutcome, KernelError> {
        let (idx, _) = self
            .states
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.next_pos().map(|p| (i, p)))
            .min_by_key(|&(_, p)| p)
            .ok_or(KernelError::Drained)?;
        let before = self.states[idx].chain.len();
        let out = self.states[idx].execute_move(self.model, &self.rng)?;
        // a first move of an arrival schedules its successor
        self.created += (self.states[idx].chain.len() + 1 - before) as u64;
        match &out.end {
            MoveEnd::Terminated => self.destroyed += 1,
            MoveEnd::Departed(t) => {
                self.states[t.location.partition as usize]
                    .chain
                    .insert(t.clone());
            }
        }
        self.moves += 1;
        self.last = Some(out.pos);
        Ok(out)
    }

    fn end_state(&self, ending: MovePos) -> EndState {
        EndState {
            counters: self.states.iter().map(|s| s.counter).collect(),
            entry_counts: self.states.iter().map(|s| s.entry_counts.clone()).collect(),
            end_clock: ending.key.time,
            ending,
        }
    }
}

/// Runs `model` to its end on one merged chain. Stops right after the move
/// that drives any partition's counter to zero or below.
pub fn run_sequential(model: &Model, rng: Rng, budget: u64) -> Result<SequentialRun, KernelError> {
    let mut sim = SequentialSim::new(model, rng);
    loop {
        if sim.moves >= budget {
            return Err(KernelError::BudgetExceeded { budget });
        }
        let out = sim.step()?;
        if out.end_reached {
            return Ok(SequentialRun {
                end: sim.end_state(out.pos),
                moves: sim.moves,
                states: sim.states,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Rng;
    use crate::model::{parse_str, BlockKind};
    use proptest::prelude::*;

    const MODEL_A: &str = include_str!("../../models/model_a.gps");
    const MODEL_B: &str = include_str!("../../models/model_b.gps");
    const LOOP: &str = include_str!("../../models/loop.gps");

    #[test]
    fn single_partition_hand_simulation() {
        let m = parse_str("t", "PARTITION P,5\nGENERATE 1,0\nTERMINATE 1\n").unwrap();
        let run = run_sequential(&m, Rng::new(0), 1000).unwrap();
        // arrivals at 1..5, the fifth terminates the run
        assert_eq!(run.end.end_clock, 5);
        assert_eq!(run.end.entry_counts, vec![vec![5, 5]]);
        assert_eq!(run.end.counters, vec![0]);
        assert_eq!(run.moves, 5);
    }

    #[test]
    fn model_a_ends_in_partition_two() {
        let m = parse_str("model_a", MODEL_A).unwrap();
        for seed in [1, 2, 3] {
            let run = run_sequential(&m, Rng::new(seed), 10_000_000).unwrap();
            assert_eq!(run.end.counters[1], 0);
            assert_eq!(run.end.entry_counts[1][1], 20000);
            assert_eq!(
                run.end.ending.key.uid.partition == 0,
                run.end.ending.hop == 1
            );
            // partition 1's TERMINATE 0 never touches its counter
            assert_eq!(run.end.counters[0], 20000);
        }
    }

    #[test]
    fn model_b_ends_with_3000_terminations_in_one_partition() {
        let m = parse_str("model_b", MODEL_B).unwrap();
        for seed in [1, 2, 3] {
            let run = run_sequential(&m, Rng::new(seed), 10_000_000).unwrap();
            let done: Vec<usize> = (0..2).filter(|&p| run.end.counters[p] == 0).collect();
            assert_eq!(done.len(), 1);
            let p = done[0];
            let terminate = m.partitions[p]
                .blocks
                .iter()
                .position(|b| matches!(b.kind, BlockKind::Terminate { .. }))
                .unwrap();
            assert_eq!(run.end.entry_counts[p][terminate], 3000);
        }
    }

    #[test]
    fn loop_model_ends() {
        let m = parse_str("loop", LOOP).unwrap();
        let run = run_sequential(&m, Rng::new(0), 1000).unwrap();
        assert_eq!(run.end.end_clock, 20);
        assert_eq!(run.end.ending.hop, 2);
        assert_eq!(run.end.entry_counts[1], vec![20]);
    }

    #[test]
    fn budget_is_enforced() {
        let m = parse_str("model_a", MODEL_A).unwrap();
        assert_eq!(
            run_sequential(&m, Rng::new(0), 100),
            Err(KernelError::BudgetExceeded { budget: 100 })
        );
    }

    fn small_model() -> impl Strategy<Value = String> {
        (1u64..6, 0u64..3, 1u64..6, 0u32..=100, 1u64..40, 1u64..40).prop_map(
            |(m1, s1, m2, p, c1, c2)| {
                format!(
                    "PARTITION A,{c1}\nGENERATE {m1},{}\nTRANSFER 0.{p:02},ToB\nBack TERMINATE 1\n\
                     PARTITION B,{c2}\nGENERATE {m2},0,3\nToB TRANSFER 0.2,Back\nTERMINATE 1\n",
                    s1.min(m1 - 1)
                )
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariants_hold_between_moves(src in small_model(), seed in any::<u64>()) {
            let m = parse_str("gen", &src).unwrap();
            let mut sim = SequentialSim::new(&m, Rng::new(seed));
            let mut prev: Option<MovePos> = None;
            loop {
                let out = sim.step().unwrap();
                if let Some(p) = prev {
                    prop_assert!(out.pos > p, "positions must increase");
                }
                prev = Some(out.pos);
                prop_assert_eq!(sim.created, sim.destroyed + sim.pending());
                for (i, st) in sim.states.iter().enumerate() {
                    let decrements: i64 = m.partitions[i].blocks.iter().enumerate()
                        .filter_map(|(b, blk)| match blk.kind {
                            BlockKind::Terminate { decrement } => Some(decrement as i64 * st.entry_counts[b] as i64),
                            _ => None,
                        })
                        .sum();
                    prop_assert_eq!(m.partitions[i].counter_start as i64 - st.counter, decrements);
                }
                if out.end_reached { break; }
            }
        }

        #[test]
        fn deterministic_per_seed(src in small_model(), seed in any::<u64>()) {
            let m = parse_str("gen", &src).unwrap();
            let a = run_sequential(&m, Rng::new(seed), 1_000_000).unwrap();
            let b = run_sequential(&m, Rng::new(seed), 1_000_000).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
