//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (data sampling, mask planning, parameter
//! init, splitting) asks for a stream by name plus a list of indices, so two
//! consumers never share state and a resumed run reproduces the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `root`, a stream name and a path of indices.
pub fn derive(root: u64, name: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ fnv1a(name));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

/// Deterministic generator for the named substream.
pub fn rng(root: u64, name: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, name, path))
}
