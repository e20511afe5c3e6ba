//! Seed derivation and content hashing helpers.

use sha2::{Digest, Sha256};

/// Derives an independent child seed from a base seed and a stream index.
///
/// SplitMix64 finalizer over `base ^ (stream * odd_constant)`. Distinct
/// streams give statistically independent ChaCha states, so subsystems
/// (dataset build, network init, rollouts per iteration, evaluation) never
/// share randomness by accident.
pub fn split_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
