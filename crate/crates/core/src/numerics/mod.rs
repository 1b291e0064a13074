//! Minimal dense-array engine: values, a gradient tape and a
//! finite-difference checker.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Array;
pub use tape::{softmax, Grads, Tape, Var, LAYER_NORM_EPS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reproducible generator used for every random draw in the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label tuple.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}
