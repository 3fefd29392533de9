//! Named deterministic RNG streams.
//!
//! Every random choice in the crate draws from a stream derived from
//! `(master seed, purpose, index)`. Streams are independent, so consuming one
//! never shifts another — runs stay bit-identical when a component is
//! disabled or parallelized.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stream for `purpose` derived from the master seed.
pub fn stream(master: u64, purpose: &str) -> ChaCha8Rng {
    stream_indexed(master, purpose, 0)
}

/// Stream for `(purpose, index)`, e.g. one per identity or per epoch.
pub fn stream_indexed(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    let tag = fnv1a(purpose.as_bytes());
    let words = [
        splitmix(master ^ tag),
        splitmix(master.wrapping_add(tag).wrapping_add(index)),
        splitmix(tag ^ index.rotate_left(17)),
        splitmix(master ^ index ^ 0x5851f42d4c957f2d),
    ];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
