//! Deterministic random streams.
//!
//! Every stochastic consumer owns a [`Stream`], a ChaCha8 generator. ChaCha
//! is counter based: the output block is a keyed function of a 64-bit block
//! counter, so streams never share state and can be created in any order.
//!
//! Child streams are keyed by `child_seed(master, tag, index)`:
//!
//! ```text
//! h   = FNV-1a-64(tag)                 offset 0xcbf29ce484222325, prime 0x100000001b3
//! key = mix(mix(master ^ h) ^ index)
//! mix(z): z += 0x9e3779b97f4a7c15
//!         z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//!         z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//!         z ^ (z >> 31)
//! ```
//!
//! and the stream is `ChaCha8Rng::seed_from_u64(key)`. Rollout `i` of a run
//! with master seed `m` always consumes `stream(m, tag, i)`, whatever thread
//! executes it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn child_seed(master: u64, tag: &str, index: u64) -> u64 {
    mix64(mix64(master ^ fnv1a64(tag.as_bytes())) ^ index)
}

pub fn stream(master: u64, tag: &str, index: u64) -> Stream {
    Stream::seed_from_u64(child_seed(master, tag, index))
}

#[inline]
pub fn gaussian<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_gaussian<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for x in out {
        *x = StandardNormal.sample(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |tag: &str, index: u64| -> Vec<u64> {
            let mut r = stream(7, tag, index);
            (0..4).map(|_| r.random()).collect()
        };
        assert_eq!(draw("rollout", 3), draw("rollout", 3));
        assert_ne!(draw("rollout", 3), draw("rollout", 4));
        assert_ne!(draw("rollout", 3), draw("eval", 3));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn splitmix_reference_value() {
        // First output of SplitMix64 seeded with 0.
        assert_eq!(mix64(0), 0xe220_a839_7b1d_cdaf);
    }
}
