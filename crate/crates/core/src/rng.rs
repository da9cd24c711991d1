//! Counter-based random streams.
//!
//! Every stochastic consumer owns its own [`Stream`]. Streams are ChaCha8
//! keystreams addressed by `(seed, stream id)`, so independent streams can be
//! derived for any (epoch, batch, repetition, chunk) path without sharing
//! mutable state and without depending on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Global seed fallback consulted when a config carries no seed.
pub const SEED_ENV: &str = "NXB_SEED";

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of labels into a single stream id.
pub fn stream_id(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x5EED_0F57_2EA4_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// The stream at `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(path));
    rng
}

/// Stream labels, kept distinct so unrelated consumers never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const DATA: u64 = 5;
    pub const MONTE_CARLO: u64 = 6;
    pub const INSTANCE: u64 = 7;
}

/// Reads [`SEED_ENV`] if set and parseable.
pub fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok()?.trim().parse().ok()
}
