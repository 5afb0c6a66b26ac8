//! Keyed random streams.
//!
//! Every consumer of randomness derives its generator from `(seed, domain,
//! index)`. The domain separates unrelated uses of one seed (noise, initial
//! conditions, shuffling) and the index selects an independent ChaCha stream,
//! so per-sample and per-trial draws never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Well-known stream domains.
pub mod domain {
    pub const NOISE: u64 = 1;
    pub const INITIAL_STATE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const WEIGHT_INIT: u64 = 4;
    pub const TRIAL: u64 = 5;
    pub const ATTACK: u64 = 6;
    pub const HARVEST: u64 = 7;
    pub const GROUP: u64 = 8;
}

const MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Returns the generator for `(seed, domain, index)`.
pub fn keyed(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(MIX));
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. one per pipeline stage or per attack attempt.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(domain.wrapping_mul(MIX))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
