//! Seed derivation. Every stochastic component draws from its own ChaCha
//! stream keyed by the global seed plus a stable label, so results do not
//! depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a base seed with a label into a new seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix(seed ^ splitmix(fnv1a(label.as_bytes())))
}

/// Mix a base seed with a label and an index.
pub fn derive_seed_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(derive_seed(seed, label) ^ splitmix(index.wrapping_add(1)))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
