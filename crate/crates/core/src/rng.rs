//! Deterministic, portable random streams.
//!
//! All randomness in the crate flows through ChaCha8 seeded from a
//! master seed plus a purpose tag, so independent pipelines (scene
//! generation, batch sampling, augmentation, parameter init) draw from
//! non-interacting streams. Identical seeds reproduce identical runs
//! on any platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag bytes; stable across platforms and releases.
fn hash_tag(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer, used to decorrelate seed material.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A ChaCha8 stream derived from `(seed, tag, id)`.
///
/// `tag` names the purpose ("scene", "labeled-batch", ...); `id` is a
/// per-item index such as a scene id or a training step.
pub fn stream(seed: u64, tag: &str, id: u64) -> ChaCha8Rng {
    let key = mix(seed ^ mix(hash_tag(tag)) ^ mix(id.wrapping_mul(0x9e3779b97f4a7c15)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Two-index variant for nested streams (e.g. step and batch slot).
pub fn stream2(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    stream(seed, tag, mix(a).wrapping_add(b))
}
