use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{BlockKind, BlockRef, Model, Partition};

use super::{EventKey, KernelError, MovePos, Rng, SimTime, Transaction, Uid};

/// Block entries a single move may make before it is declared a zero-time
/// loop inside one partition.
const MAX_STEPS_PER_MOVE: u32 = 100_000;

/// One GENERATE block and where it sits among the partition's generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Generator {
    pub at: BlockRef,
    pub mean: u64,
    pub spread: u64,
    pub offset: Option<u64>,
    /// Index among the partition's GENERATE blocks.
    pub ordinal: u64,
    /// Number of GENERATE blocks in the partition.
    pub count: u64,
}

impl Generator {
    pub fn of_partition(model: &Model, partition: u32) -> Vec<Generator> {
        let p = &model.partitions[partition as usize];
        let count = p.generate_blocks().count() as u64;
        p.generate_blocks()
            .enumerate()
            .map(|(ordinal, (block, b))| {
                let BlockKind::Generate {
                    mean,
                    spread,
                    offset,
                } = b.kind
                else {
                    unreachable!()
                };
                Generator {
                    at: BlockRef { partition, block },
                    mean,
                    spread,
                    offset,
                    ordinal: ordinal as u64,
                    count,
                }
            })
            .collect()
    }

    fn interval(&self, n: u64, rng: &Rng) -> u64 {
        self.mean - self.spread + rng.interval_jitter(self.at, n, self.spread)
    }

    /// Arrival `n`, given the time of arrival `n - 1` (`None` for `n = 0`).
    pub fn next_arrival(&self, n: u64, prev: Option<SimTime>, rng: &Rng) -> Transaction {
        let time = match (n, self.offset, prev) {
            (0, Some(offset), _) => offset,
            (0, None, _) => self.interval(0, rng),
            (_, _, Some(prev)) => prev + self.interval(n, rng),
            (_, _, None) => panic!("arrival {n} needs the previous arrival time"),
        };
        Transaction {
            uid: Uid {
                partition: self.at.partition,
                seq: n * self.count + self.ordinal,
            },
            time,
            priority: 0,
            location: BlockRef {
                partition: self.at.partition,
                block: self.at.block + 1,
            },
            hop: 0,
            steps: 0,
            pending_generate: Some(self.at.block),
        }
    }

    /// Arrival time of arrival `n`, evaluated from scratch.
    pub fn arrival_time(&self, n: u64, rng: &Rng) -> SimTime {
        let mut t = self.next_arrival(0, None, rng).time;
        for i in 1..=n {
            t += self.interval(i, rng);
        }
        t
    }
}

/// Pending moves ordered by position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransactionChain {
    entries: BTreeMap<MovePos, Transaction>,
}

impl TransactionChain {
    pub fn insert(&mut self, txn: Transaction) {
        let prev = self.entries.insert(txn.pos(), txn);
        debug_assert!(prev.is_none(), "two pending moves at one position");
    }

    pub fn pop(&mut self) -> Option<Transaction> {
        self.entries.pop_first().map(|(_, t)| t)
    }

    pub fn peek(&self) -> Option<&Transaction> {
        self.entries.values().next()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.entries.values()
    }
}

/// How a move ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MoveEnd {
    Terminated,
    /// Left for another partition at the same simulation time.
    Departed(Transaction),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoveOutcome {
    pub pos: MovePos,
    pub end: MoveEnd,
    /// The move drove the termination counter to zero or below.
    pub end_reached: bool,
}

/// Everything needed to continue simulating one partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineState {
    pub partition: u32,
    pub chain: TransactionChain,
    pub counter: i64,
    pub entry_counts: Vec<u64>,
    /// Per block: sequence number of the arrival currently scheduled by that
    /// GENERATE (zero for other blocks).
    pub next_gen_seq: Vec<u64>,
    /// Time of the last executed move.
    pub clock: SimTime,
}

#[derive(Serialize)]
struct CanonicalView<'a> {
    partition: u32,
    chain: Vec<&'a Transaction>,
    counter: i64,
    entry_counts: &'a [u64],
    next_gen_seq: &'a [u64],
    clock: SimTime,
}

/// Owned form of the canonical serialization, for round-trips.
#[derive(Debug, Deserialize, PartialEq)]
pub struct CanonicalState {
    pub partition: u32,
    pub chain: Vec<Transaction>,
    pub counter: i64,
    pub entry_counts: Vec<u64>,
    pub next_gen_seq: Vec<u64>,
    pub clock: SimTime,
}

impl EngineState {
    /// Initial state with the first arrival of every GENERATE scheduled.
    pub fn new(model: &Model, partition: u32, rng: &Rng) -> Self {
        let p = &model.partitions[partition as usize];
        let mut chain = TransactionChain::default();
        for g in Generator::of_partition(model, partition) {
            chain.insert(g.next_arrival(0, None, rng));
        }
        EngineState {
            partition,
            chain,
            counter: p.counter_start as i64,
            entry_counts: vec![0; p.blocks.len()],
            next_gen_seq: vec![0; p.blocks.len()],
            clock: 0,
        }
    }

    pub fn next_pos(&self) -> Option<MovePos> {
        self.chain.peek().map(Transaction::pos)
    }

    pub fn next_key(&self) -> Option<EventKey> {
        self.chain.peek().map(Transaction::key)
    }

    /// Stable serialization; equal states serialize to equal strings.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&CanonicalView {
            partition: self.partition,
            chain: self.chain.iter().collect(),
            counter: self.counter,
            entry_counts: &self.entry_counts,
            next_gen_seq: &self.next_gen_seq,
            clock: self.clock,
        })
        .expect("engine state serializes")
    }

    /// Pops the chain head and moves it.
    pub fn execute_move(&mut self, model: &Model, rng: &Rng) -> Result<MoveOutcome, KernelError> {
        let txn = self.chain.pop().ok_or(KernelError::EmptyChain)?;
        self.advance(model, rng, txn)
    }

    /// Moves `txn` through the partition's blocks until it terminates or
    /// departs.
    pub fn advance(
        &mut self,
        model: &Model,
        rng: &Rng,
        mut txn: Transaction,
    ) -> Result<MoveOutcome, KernelError> {
        debug_assert_eq!(txn.location.partition, self.partition);
        let pos = txn.pos();
        let partition: &Partition = &model.partitions[self.partition as usize];
        self.clock = txn.time;

        if let Some(g) = txn.pending_generate.take() {
            self.entry_counts[g as usize] += 1;
            let generator = Generator::of_partition(model, self.partition)
                .into_iter()
                .find(|gen| gen.at.block == g)
                .expect("arrival from a GENERATE block");
            let n = self.next_gen_seq[g as usize] + 1;
            self.next_gen_seq[g as usize] = n;
            self.chain
                .insert(generator.next_arrival(n, Some(txn.time), rng));
        }

        let mut entered = 0u32;
        loop {
            if entered >= MAX_STEPS_PER_MOVE {
                return Err(KernelError::RunawayMove {
                    uid: txn.uid,
                    partition: self.partition,
                    steps: entered,
                });
            }
            let at = txn.location;
            let block = &partition.blocks[at.block as usize];
            match &block.kind {
                BlockKind::Generate { .. } => {
                    // never entered by a moving transaction
                    txn.location.block += 1;
                }
                BlockKind::Transfer {
                    probability, dest, ..
                } => {
                    self.entry_counts[at.block as usize] += 1;
                    let visit = txn.steps;
                    txn.steps += 1;
                    entered += 1;
                    if rng.transfer_taken(at, txn.uid, visit, *probability) {
                        txn.location = *dest;
                        if dest.partition != self.partition {
                            txn.hop += 1;
                            return Ok(MoveOutcome {
                                pos,
                                end: MoveEnd::Departed(txn),
                                end_reached: false,
                            });
                        }
                    } else {
                        txn.location.block += 1;
                    }
                }
                BlockKind::Terminate { decrement } => {
                    self.entry_counts[at.block as usize] += 1;
                    let before = self.counter;
                    self.counter -= *decrement as i64;
                    return Ok(MoveOutcome {
                        pos,
                        end: MoveEnd::Terminated,
                        end_reached: *decrement > 0 && before > 0 && self.counter <= 0,
                    });
                }
            }
        }
    }
}
