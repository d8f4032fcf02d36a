//! Deterministic keyed RNG streams.
//!
//! Every random draw in a run comes from a stream keyed by the master seed
//! plus a purpose tag and (round, unit) indices. Streams are independent of
//! execution order, so parallel client solves reproduce the sequential run
//! bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps draws for unrelated purposes decoupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Initial parameter matrix.
    Init,
    /// Per-round fault sampling.
    Faults,
    /// Per-(client, round) local solve (batch shuffles).
    ClientSolve,
    /// Dataset generation and partitioning.
    Data,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Init => 0x01,
            StreamKind::Faults => 0x02,
            StreamKind::ClientSolve => 0x03,
            StreamKind::Data => 0x04,
        }
    }
}

// SplitMix64 step; mixes the key components into a well-spread 64-bit seed.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix(acc ^ p);
    }
    acc
}

/// Stream for draws tied to a (round, unit) pair, e.g. a client solve.
pub fn stream(master_seed: u64, kind: StreamKind, round: u64, unit: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[master_seed, kind.tag(), round, unit]))
}

/// Stream for run-level draws (initialization, data generation).
pub fn run_stream(master_seed: u64, kind: StreamKind) -> ChaCha8Rng {
    stream(master_seed, kind, 0, 0)
}
