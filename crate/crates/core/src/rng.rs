//! Seeded random streams.
//!
//! Every random consumer derives its own ChaCha stream from a global seed plus
//! a small tuple of indices, so that adding a consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A stream keyed by `(seed, stream ids...)`.
pub fn stream(seed: u64, ids: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &id in ids {
        h = splitmix(h ^ splitmix(id));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Named stream ids used across the crate.
pub mod ids {
    pub const CODEBOOK_INIT: u64 = 1;
    pub const CODEC_INIT: u64 = 2;
    pub const DATASET: u64 = 3;
    pub const HELDOUT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const LM_INIT: u64 = 6;
    pub const SAMPLING: u64 = 7;
    pub const SPECTRAL: u64 = 8;
    pub const DIAGNOSTIC: u64 = 9;
}
