//! Deterministic seed derivation for independent sub-streams.

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for the stream identified by `path` under `base`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| {
        mix(acc.rotate_left(23) ^ mix(p.wrapping_add(0xD1B5_4A32_D192_ED03)))
    })
}

/// Stream tags used across the crate.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const FOLD: u64 = 4;
    pub const LABELS: u64 = 5;
    pub const SUBJECT: u64 = 6;
    pub const DOMAIN: u64 = 7;
    pub const BALANCE: u64 = 8;
    pub const SPLIT: u64 = 9;
}
