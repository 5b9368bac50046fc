//! Deterministic seed derivation.
//!
//! Sub-streams (episodes, evaluation runs, update cycles) each get their own
//! ChaCha generator keyed by a derived seed, so results never depend on the
//! order in which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a base seed with a stream tag and an index.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(base ^ mix64(stream)).wrapping_add(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    rng(derive(base, stream, index))
}

/// Stream tags.
pub mod stream {
    pub const EPISODE: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const UPDATE: u64 = 3;
    pub const SFT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const PROFILE: u64 = 6;
    pub const EXPERT: u64 = 7;
    pub const POOL: u64 = 8;
    pub const ROLLOUT: u64 = 9;
}
