//! Seed derivation for independent deterministic random streams.
//!
//! Every stochastic stage (weight init, epoch shuffles, per-image attack
//! starts, per-image dataset recipes) draws from its own stream derived from
//! one base seed, so adding or removing one stage never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are arbitrary but fixed forever.
pub const STREAM_INIT: u64 = 0x01;
pub const STREAM_SHUFFLE: u64 = 0x02;
pub const STREAM_ATTACK: u64 = 0x03;
pub const STREAM_DATA: u64 = 0x04;

/// SplitMix64 finalizer; a cheap, well-mixed 64-bit permutation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives an independent seed from `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ stream.wrapping_mul(0xd6e8feb86659fd93)) ^ index)
}

/// Seeded generator for one derived stream.
pub fn stream_rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
