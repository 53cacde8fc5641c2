//! Seeded pseudo-random source used everywhere randomness is needed.
//!
//! The generator is xoshiro256++ (Blackman and Vigna), a 64-bit xorshift-family
//! generator with fixed rotation/shift constants (17, 45, 23). A `u64` seed is
//! expanded into the 256-bit state with SplitMix64 (increment `0x9E3779B97F4A7C15`,
//! multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`, shifts 30/27/31).
//! Both are bit-exact across platforms, so every seeded output is portable.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng64 = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

/// Independent stream for item `index` under a base seed.
pub fn derived(seed: u64, index: u64) -> Rng64 {
    seeded(mix(seed, index))
}

/// SplitMix64 finaliser over `seed + (index + 1) * golden`.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
