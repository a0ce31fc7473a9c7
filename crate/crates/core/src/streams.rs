//! Seed derivation and counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha stream keyed by a seed and a
//! stream index (usually a subject or replication index), so parallel and
//! sequential generation give identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and a path of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

/// Independent stream `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Tags for the purposes a replication draws randomness for.
pub mod tag {
    pub const COHORT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const DESIGN: u64 = 3;
    pub const SRS: u64 = 4;
    pub const FIT: u64 = 5;
    pub const CALIBRATE: u64 = 6;
    pub const BACKGROUND: u64 = 7;
    pub const CV: u64 = 8;
}
