//! Seed derivation for independent, reproducible worker streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of stream `index` under `base_seed`.
pub fn stream_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base_seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

pub fn stream_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base_seed, index))
}
