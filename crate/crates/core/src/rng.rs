//! Deterministic RNG streams.
//!
//! Every random draw in this crate flows through a ChaCha8 generator keyed by
//! an explicit seed. Independent substreams (one per tree, per fold, per
//! k-means init) come from the generator's 64-bit stream counter, so fits can
//! run in parallel in any order and still reproduce bit-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A ChaCha8 generator keyed by `seed` on substream `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes `salt` values into `base` to derive a child seed (splitmix64 chain).
///
/// Used to give each nuisance/causal fit its own seed from a single
/// user-facing seed without the fits sharing draws.
pub fn derive_seed(base: u64, salt: &[u64]) -> u64 {
    let mut state = base;
    for &s in salt {
        state = splitmix64(state ^ splitmix64(s));
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
