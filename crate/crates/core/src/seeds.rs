//! Sub-seed derivation from a single master seed.
//!
//! `derive(master, stage, index)` hashes the stage label with FNV-1a, mixes it
//! with the master seed and the index, and finishes with SplitMix64. Distinct
//! `(stage, index)` pairs give independent streams that depend on nothing but
//! the master seed.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

pub fn derive(master: u64, stage: &str, index: u64) -> u64 {
    let a = splitmix64(master ^ fnv1a(stage));
    splitmix64(a ^ splitmix64(index))
}
