//! Deterministic seed derivation and RNG construction.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose seed
//! is derived from a base seed plus a tag path, so independent substreams
//! (per patch, per epoch, per MC pass) never alias and every run is
//! reproducible bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags naming the crate's RNG substreams.
pub mod stream {
    pub const DATA_GEN: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARAM_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const MC_PASS: u64 = 6;
}

/// SplitMix64 finalizer; a well-mixed 64-bit hash step.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

/// Builds the deterministic RNG for a given substream.
pub fn substream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
