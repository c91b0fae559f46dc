//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a root seed mixed with a stable 64-bit hash of a label, so a
//! given (root, label) pair reproduces the same stream on any platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `root ⊕ salt`, finalized.
pub fn derive(root: u64, salt: u64) -> u64 {
    splitmix64(root ^ salt)
}

pub fn derive_str(root: u64, label: &str) -> u64 {
    derive(root, fnv1a(label.as_bytes()))
}

pub fn derive_index(root: u64, label: &str, index: u64) -> u64 {
    derive(derive_str(root, label), splitmix64(index))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
