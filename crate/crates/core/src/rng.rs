//! Seed derivation for reproducible, schedule-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective 64-bit avalanche mix.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `index` under `master_seed`.
///
/// `mix64(mix64(master_seed) + (index + 1) * GOLDEN_GAMMA)`. For a fixed
/// master seed the map `index -> seed` is injective, since both the affine
/// step and `mix64` are bijections on `u64`.
pub fn derive_substream(master_seed: u64, index: u64) -> u64 {
    let base = mix64(master_seed);
    mix64(base.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Generator for substream `index` under `master_seed`.
pub fn substream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_substream(master_seed, index))
}
