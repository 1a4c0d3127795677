//! The one RNG everything samples through.
//!
//! ChaCha8 is portable and its output for a given seed is fixed across
//! platforms and releases of `rand_chacha`, which keeps frozen test values
//! and CLI reports stable. Independent substreams (one per user, one per
//! trial) use the ChaCha stream counter rather than reseeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer. Used where a stateless, seeded per-id coin is
/// needed (user-disjoint splits).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps `mix64(seed, id)` to a uniform real in `[0, 1)`.
pub fn unit_hash(seed: u64, id: u64) -> f64 {
    let h = mix64(mix64(seed) ^ id);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
