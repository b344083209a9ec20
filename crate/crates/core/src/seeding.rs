//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! base seed plus one or more indices, so results never depend on the order
//! in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed, a domain tag and an index.
pub fn key(seed: u64, domain: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ domain.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, domain, index))
}

// Domain tags keep streams for different purposes independent.
pub const DOMAIN_CHAIN: u64 = 1;
pub const DOMAIN_SENTENCE: u64 = 2;
pub const DOMAIN_SHUFFLE: u64 = 3;
pub const DOMAIN_STRATEGY: u64 = 4;
pub const DOMAIN_INIT: u64 = 5;
pub const DOMAIN_EXPERIMENT: u64 = 6;
pub const DOMAIN_LORA: u64 = 7;
pub const DOMAIN_GRADCHECK: u64 = 8;
