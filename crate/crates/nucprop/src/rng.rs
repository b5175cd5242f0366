//! Seed derivation for reproducible, parallelizable randomness.
//!
//! Every random draw in this crate comes from a [`ChaCha12Rng`] seeded
//! through [`derive_seed`]. Deriving an independent seed per frame, per
//! pixel or per placement attempt means work items can be processed in
//! any order (or in parallel) and still produce bit-identical output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mix a base seed with a stream tag into a new 64-bit seed.
///
/// SplitMix64 finalizer over `seed + tag * golden_gamma`; distinct tags give
/// statistically independent streams even for small consecutive tag values.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the sub-stream `tag` of `seed`.
pub fn stream_rng(seed: u64, tag: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, tag))
}
