//! Counter-keyed random streams.
//!
//! Every stream is a pure function of `(seed, key...)`, so results do not
//! depend on which thread evaluates which pixel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stratum tags that separate the streams of one pixel evaluation.
pub mod stratum {
    pub const SPECULAR: u64 = 1;
    pub const DIFFUSE_FLOW: u64 = 2;
    pub const DIFFUSE_COSINE: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const REGULARIZER: u64 = 5;
    pub const INIT: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, pixel, iteration, stratum)`.
pub fn stream(seed: u64, pixel: u64, iteration: u64, stratum: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    for (i, part) in [pixel, iteration, stratum].into_iter().enumerate() {
        h = splitmix64(h ^ part.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        key[8 * i..8 * i + 8].copy_from_slice(&h.to_le_bytes());
    }
    key[24..].copy_from_slice(&splitmix64(h).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
