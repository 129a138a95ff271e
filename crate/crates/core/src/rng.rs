//! Seeded random streams. Every stochastic step draws from its own ChaCha stream
//! so that adding draws in one place never shifts the sequence seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const FOLDS: u64 = 1;
    pub const LABEL_FRACTION: u64 = 2;
    pub const CENTERS: u64 = 3;
    pub const WEAK: u64 = 4;
    pub const STRONG: u64 = 5;
    pub const INIT: u64 = 6;
    pub const LABELED_LOADER: u64 = 7;
    pub const UNLABELED_LOADER: u64 = 8;
    pub const DROPOUT: u64 = 9;
    pub const PAIRING: u64 = 10;
    pub const FIXTURE: u64 = 11;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes several integers into one seed (splitmix64 finalizer over a running hash).
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
