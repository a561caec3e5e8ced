//! Seed derivation for reproducible substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of a master seed and a tuple of integer coordinates (instance index,
//! coalition mask, ...). Results therefore do not depend on the order in which
//! parallel workers pick up tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `master` to get the seed of an independent substream.
pub fn substream_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn substream(master: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(substream_seed(master, parts))
}
