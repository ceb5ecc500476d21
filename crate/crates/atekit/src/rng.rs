//! Counter-based random stream derivation.
//!
//! Every stochastic operation derives its generator from a master seed plus a
//! fixed list of tags (a stream label and counters such as the trial index and
//! replicate index). Two calls with the same tags always see the same stream,
//! no matter which threads run them or in what order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels keeping independent uses of the same master seed apart.
pub mod stream {
    pub const GENERATOR: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const ESTIMATOR: u64 = 0x03;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed and tag list into a single derived 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for &tag in tags {
        state ^= splitmix64(&mut { tag });
        out ^= splitmix64(&mut state);
    }
    out
}

/// Builds a deterministic generator for the given (master seed, tags) stream.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = derive_seed(master, tags);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
