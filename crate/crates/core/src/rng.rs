//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a run
//! seed and a stream number, so results never depend on iteration or thread order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream numbers for the non-patient consumers. Patient streams use the patient id.
pub mod streams {
    pub const SPLIT: u64 = 1 << 40;
    pub const INIT: u64 = (1 << 40) + 1;
    pub const SHUFFLE: u64 = (1 << 40) + 2;
    pub const NOISE: u64 = (1 << 40) + 3;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two numbers into a seed (splitmix64 finalizer). Used to derive per-step seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
