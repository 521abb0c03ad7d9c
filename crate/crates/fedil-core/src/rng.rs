//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! pure function of the experiment seed and a role path (round, client id,
//! example id, ...). Nothing advances a shared stream, so adding or removing
//! an optional pass never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from `base` and a role path.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base;
    let mut out = splitmix64(&mut state);
    for &part in path {
        state ^= part.wrapping_mul(0xff51_afd7_ed55_8ccd);
        out ^= splitmix64(&mut state);
    }
    out
}

/// ChaCha generator for the stream named by `(base, path)`.
pub fn rng_from(base: u64, path: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, path))
}
