//! Seed streams.
//!
//! Every random draw comes from ChaCha8 keyed by the run seed, with a
//! 64-bit stream index selecting an independent sequence. Stream indices:
//! 0 = parameter initialisation, 1 = task sampling, 2 = evaluation. Higher
//! indices are derived with [`substream`] for per-cell or per-task needs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_INIT: u64 = 0;
pub const STREAM_TASKS: u64 = 1;
pub const STREAM_EVAL: u64 = 2;

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stream index for the `k`-th child of `parent`, kept clear of the
/// reserved indices.
pub fn substream(parent: u64, k: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = parent
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z | 0x100
}
