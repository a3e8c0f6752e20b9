//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline draws from a `ChaCha8Rng` whose
//! seed is derived from the experiment master seed plus a context path
//! (a stream tag and indices such as round / architecture / worker id).
//! Derivation is a fixed-point mixing function, so results never depend
//! on call order, thread scheduling, or how many draws another component
//! consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keeping unrelated consumers of the master seed apart.
pub mod stream {
    pub const TRIP: u64 = 0x7472_6970; // trajectory synthesis, per trip
    pub const SPLIT: u64 = 0x7370_6c69; // proxy/train/test shuffling
    pub const PART: u64 = 0x7061_7274; // non-IID partition shuffling
    pub const INIT: u64 = 0x696e_6974; // parameter initialization, per arch
    pub const LOCAL: u64 = 0x6c6f_6361; // local epochs, per (round, arch, worker)
    pub const SELECT: u64 = 0x7365_6c65; // participant selection, per round
    pub const META: u64 = 0x6d65_7461; // meta-learner training
    pub const GRADCHECK: u64 = 0x6772_6164; // gradient-check probe models
}

/// Mixes a seed path into a single 64-bit value (splitmix64 finalizer over
/// a running state, one absorption step per part).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &part in parts {
        state = state.wrapping_add(part).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 31;
        state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
        state ^= state >> 27;
    }
    state
}

/// A deterministic RNG for the given seed path.
pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}
