//! Seeded randomness. Each run derives independent streams from one seed so
//! that optional work on one stream (router noise, expert sampling) never
//! perturbs another (data order, student sampling).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    Sampling = 1,
    Routing = 2,
    Augment = 3,
    Init = 4,
}

pub fn stream(seed: u64, which: Stream) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
