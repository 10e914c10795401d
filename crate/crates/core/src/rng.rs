//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream, keyed by
//! a seed and a fixed stream id, so one seed can drive all of them without
//! the streams overlapping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    Data = 4,
    Split = 5,
    EvalNoise = 6,
    Check = 7,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Independent sub-stream for epoch-indexed draws.
pub fn epoch_stream(seed: u64, which: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 8) | which as u64);
    rng
}
