//! Stable hashing helpers shared by seed derivation, feature hashing and
//! parameter digests. Everything here must produce identical values across
//! platforms and toolchain versions, so `std::hash` is not used.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded 64-bit FNV-1a over `bytes`.
pub fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; spreads FNV output before it is used as an RNG seed.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label (module id, trial tag, ...).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix64(fnv1a(seed, label.as_bytes()))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a float slice by exact bit pattern.
pub fn digest_f64s(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_depends_on_seed_and_bytes() {
        assert_ne!(fnv1a(0, b"a"), fnv1a(1, b"a"));
        assert_ne!(fnv1a(0, b"a"), fnv1a(0, b"b"));
        assert_eq!(fnv1a(7, b"token"), fnv1a(7, b"token"));
    }

    #[test]
    fn derived_seeds_differ_per_label() {
        let a = derive_seed(7, "m1");
        let b = derive_seed(7, "m2");
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, "m1"));
    }

    #[test]
    fn float_digest_sees_sign_of_zero() {
        assert_ne!(digest_f64s(&[0.0]), digest_f64s(&[-0.0]));
    }
}
