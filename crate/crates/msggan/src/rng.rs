//! Deterministic, resumable random streams.
//!
//! Every consumer of randomness derives its own stream from (run seed,
//! purpose label, counter). A stream's output depends only on those three
//! values, never on how much randomness other components consumed, so
//! resuming a run from step `n` reproduces the uninterrupted trajectory by
//! re-deriving the streams for steps `n+1, n+2, ...`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over the purpose label.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby (seed, purpose, counter) tuples.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A fresh RNG for one (seed, purpose, counter) triple.
pub fn stream(seed: u64, purpose: &str, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let p = fnv1a(purpose.as_bytes());
    let words = [
        mix(seed ^ p),
        mix(seed.wrapping_add(mix(p ^ counter))),
        mix(counter ^ 0xa5a5a5a5a5a5a5a5),
        mix(seed ^ counter.rotate_left(17) ^ p.rotate_left(31)),
    ];
    for (i, w) in words.iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
