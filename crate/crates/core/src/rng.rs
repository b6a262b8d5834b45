//! Deterministic randomness.
//!
//! Every stochastic step takes an explicit `u64` seed. Independent streams
//! (one per pullback, per epoch, ...) are derived from a root seed with a
//! splitmix64 step so that streams never overlap and the derivation is
//! documented rather than ad hoc.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 output step. Small, well-mixed, and stable.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed for sub-stream `stream` of a root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut state = root ^ stream.wrapping_mul(0xa076_1d64_78bd_642f);
    splitmix64(&mut state)
}

/// The crate-wide RNG: ChaCha8 keyed from a single `u64`.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
