//! Seeded random streams, one per subsystem of a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Generator = 1,
    Env = 2,
    Trainer = 3,
    Selector = 4,
    Noise = 5,
    Eval = 6,
    Order = 7,
}

/// Independent ChaCha stream for `stream`, derived from the run seed.
pub fn stream(seed: u64, stream: Stream) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
