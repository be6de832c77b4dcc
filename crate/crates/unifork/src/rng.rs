//! Seeded RNG substreams.
//!
//! All randomness in an experiment flows from one root seed. Named substreams
//! (data, init, dropout, sampler) are derived from it, so e.g. two ablation
//! variants driven by the same root seed consume identical data streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit hash of a substream name (FNV-1a).
fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for a named substream of `root`.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(root ^ hash_name(name)))
}

/// RNG keyed by a substream name plus integer indices, e.g.
/// `keyed(seed, "sampler", &[prompt_id, replica])`. Streams for distinct keys
/// are independent, so per-sample work can run in any order.
pub fn keyed(root: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix(root ^ hash_name(name));
    for &ix in indices {
        s = splitmix(s ^ ix.wrapping_mul(0x9e3779b97f4a7c15));
    }
    ChaCha8Rng::seed_from_u64(s)
}
