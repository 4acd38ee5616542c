//! Keyed, counter-based randomness.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose key is
//! derived from a `(seed, purpose, indices...)` tuple. Two calls with the same
//! key observe the same stream regardless of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, used to fingerprint strategy descriptions and labels.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from a parent seed and a path of indices.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    let mut h = mix64(seed);
    for &p in path {
        h = mix64(h ^ mix64(p.wrapping_add(GOLDEN)));
    }
    h
}

/// ChaCha8 generator keyed by `(seed, path)`; `stream` selects an independent
/// substream of the same key.
pub fn keyed_rng(seed: u64, path: &[u64], stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = derive(seed, path);
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&h.to_le_bytes());
        h = mix64(h);
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}
