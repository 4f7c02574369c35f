//! Deterministic random stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from
//! the experiment seed plus a chain of domain tags. Two call sites that mix
//! different tags get statistically independent streams, and any stream can
//! be re-derived later (e.g. when resuming training or replaying a channel
//! realization for one sample).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Domain tags for derived streams. Keeping them in one place avoids
/// accidental collisions between subsystems.
pub mod tags {
    pub const MODEL_INIT: u64 = 0x01;
    pub const TRAIN_STEP: u64 = 0x02;
    pub const DATA_SHUFFLE: u64 = 0x03;
    pub const CHANNEL: u64 = 0x04;
    pub const ATTACK: u64 = 0x05;
    pub const SYNTH_IMAGE: u64 = 0x06;
    pub const CLASSIFIER: u64 = 0x07;
    pub const EXTRACTOR: u64 = 0x08;
    pub const EVAL: u64 = 0x09;
    pub const VALIDATION: u64 = 0x0a;
}

/// SplitMix64 step; a good 64-bit mixer for combining seeds with tags.
pub fn mix(state: u64, tag: u64) -> u64 {
    let mut z = state
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent stream from `seed` and a chain of tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut s = mix(seed, 0x5eed);
    for &t in tags {
        s = mix(s, t);
    }
    ChaCha12Rng::seed_from_u64(s)
}
