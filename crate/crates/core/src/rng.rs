//! Seed derivation. Every consumer of randomness draws from its own ChaCha
//! stream so that changing one stage never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_WORLD: u64 = 1;
pub(crate) const STREAM_FUNCTOR: u64 = 2;
pub(crate) const STREAM_SPLIT: u64 = 3;
pub(crate) const STREAM_SPARSIFY: u64 = 4;
pub(crate) const STREAM_INIT: u64 = 5;
pub(crate) const STREAM_SHUFFLE: u64 = 6;
pub(crate) const STREAM_PROMPT: u64 = 7;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a run seed with a salt (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
