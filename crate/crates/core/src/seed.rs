//! Deterministic seed derivation.
//!
//! Every random stream in the toolkit is keyed by an explicit 64-bit seed
//! combined with string/integer parts, so results never depend on
//! scheduling order or wall-clock state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A component mixed into a derived seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Str(s)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::Int(v)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::Int(v as u64)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash `seed` together with `parts` into a new seed.
pub fn derive(seed: u64, parts: &[SeedPart<'_>]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    for part in parts {
        match part {
            // Tag bytes keep ("ab", "c") and ("a", "bc") apart.
            SeedPart::Str(s) => {
                h = fnv1a(h, &[0x01]);
                h = fnv1a(h, &(s.len() as u64).to_le_bytes());
                h = fnv1a(h, s.as_bytes());
            }
            SeedPart::Int(v) => {
                h = fnv1a(h, &[0x02]);
                h = fnv1a(h, &v.to_le_bytes());
            }
        }
    }
    mix64(h)
}

/// A ChaCha8 generator for a derived seed.
pub fn rng(seed: u64, parts: &[SeedPart<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Uniform value in [0, 1) from a 64-bit hash.
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
