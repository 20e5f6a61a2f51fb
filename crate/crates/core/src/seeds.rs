//! Deterministic derivation of independent seeds for pipeline stages.

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a sequence of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub const STAGE_LAYOUT: u64 = 1;
pub const STAGE_MESH: u64 = 2;
pub const STAGE_SAMPLES: u64 = 3;
pub const STAGE_TRAIN: u64 = 4;
pub const STAGE_METRICS: u64 = 5;
pub const STAGE_NOISE: u64 = 6;
pub const STAGE_DISTINGUISH: u64 = 7;
