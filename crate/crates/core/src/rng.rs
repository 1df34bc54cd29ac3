//! Seeded PRNG streams, one per purpose, so that e.g. changing the
//! augmentation policy never perturbs parameter initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Gates = 2,
    Augment = 3,
    Prototypes = 4,
    Shuffle = 5,
    TrainData = 6,
    TestData = 7,
    Oracle = 8,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
