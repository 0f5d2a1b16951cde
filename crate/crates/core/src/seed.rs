//! Deterministic seed derivation.
//!
//! Every random stream in the crate is keyed by a base seed plus a label,
//! so results never depend on iteration or thread scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a byte label.
pub fn derive(base: u64, label: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix(base);
    for &b in label {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

/// Mixes a base seed with a sequence of integers.
pub fn derive_ints(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Uniform in [0, 1) from a derived seed.
pub fn unit(seed: u64) -> f64 {
    (splitmix(seed) >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal from a derived seed (Box-Muller).
pub fn normal(seed: u64) -> f64 {
    let u1 = unit(seed).max(f64::MIN_POSITIVE);
    let u2 = unit(seed ^ 0x5555_5555_5555_5555);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
