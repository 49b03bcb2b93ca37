//! Seed derivation. All randomness in the crate flows from one root seed
//! through named streams, so stages and per-user draws are independent and
//! reproducible regardless of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a root seed and a stream name.
///
/// Two streams with different names are statistically independent; the same
/// (root, name) pair always yields the same seed, on every platform.
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    let bytes = stream_bytes(root, stream);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}

/// A ChaCha RNG keyed by (root seed, stream name).
pub fn stream_rng(root: u64, stream: &str) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(stream_bytes(root, stream))
}

fn stream_bytes(root: u64, stream: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(stream.as_bytes());
    hasher.finalize().into()
}
