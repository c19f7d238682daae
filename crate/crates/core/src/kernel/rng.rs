//! Counter-based random draws.
//!
//! A draw is a hash of `(seed, stream, coordinates...)`, so it does not depend
//! on how many draws happened before it. Re-executing a move after a rollback
//! therefore sees exactly the same values as the first execution.

use serde::{Deserialize, Serialize};

use crate::model::{BlockRef, Probability};

use super::Uid;

const STREAM_INTERVAL: u64 = 0x4745_4e45_5241_5445; // "GENERATE"
const STREAM_TRANSFER: u64 = 0x5452_414e_5346_4552; // "TRANSFER"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 64-bit draw for a stream tag and its coordinates.
    pub fn draw(&self, stream: u64, coords: &[u64]) -> u64 {
        let mut h = splitmix(self.seed ^ splitmix(stream));
        for &c in coords {
            h = splitmix(h ^ c);
        }
        h
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    fn below(raw: u64, n: u64) -> u64 {
        ((raw as u128 * n as u128) >> 64) as u64
    }

    /// Interarrival offset in `[0, 2 * spread]` for arrival `n` of the
    /// GENERATE block at `at`.
    pub fn interval_jitter(&self, at: BlockRef, n: u64, spread: u64) -> u64 {
        if spread == 0 {
            return 0;
        }
        let raw = self.draw(STREAM_INTERVAL, &[at.partition as u64, at.block as u64, n]);
        Self::below(raw, 2 * spread + 1)
    }

    /// Whether the TRANSFER at `at` takes its branch for transaction `uid` on
    /// its `visit`-th block entry.
    pub fn transfer_taken(&self, at: BlockRef, uid: Uid, visit: u32, p: Probability) -> bool {
        let den = p.denominator();
        if p.units() >= den {
            return true;
        }
        if p.units() == 0 {
            return false;
        }
        let raw = self.draw(
            STREAM_TRANSFER,
            &[
                at.partition as u64,
                at.block as u64,
                uid.partition as u64,
                uid.seq,
                visit as u64,
            ],
        );
        Self::below(raw, den) < p.units()
    }
}
