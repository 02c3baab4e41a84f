//! Deterministic seeded randomness.
//!
//! Every random decision in the crate flows from a single `u64` seed.
//! Component seeds are derived by hashing the base seed together with a
//! text label, so adding a new consumer never shifts the streams of
//! existing ones. Streams are xoshiro256++ generators (seeded through
//! splitmix64, as done by [`rand_xoshiro`]).

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

/// The crate-wide RNG stream type.
pub type Stream = Xoshiro256PlusPlus;

/// Derive a per-component seed from a base seed and a label.
///
/// The derivation is the first eight bytes (little-endian) of
/// `SHA-256(base_seed_le || label)`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Open the labeled stream derived from `base`.
pub fn stream(base: u64, label: &str) -> Stream {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(base, label))
}

/// Fill a buffer with uniform samples from `[-bound, bound)`.
pub fn fill_uniform(rng: &mut Stream, buf: &mut [f64], bound: f64) {
    for v in buf.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_label_sensitive() {
        let a = derive_seed(7, "datagen");
        let b = derive_seed(7, "datagen");
        let c = derive_seed(7, "init");
        let d = derive_seed(8, "datagen");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_replay_exactly() {
        let xs: Vec<f64> = stream(42, "x").sample_iter(rand::distributions::Standard).take(16).collect();
        let ys: Vec<f64> = stream(42, "x").sample_iter(rand::distributions::Standard).take(16).collect();
        assert_eq!(xs, ys);
    }
}
