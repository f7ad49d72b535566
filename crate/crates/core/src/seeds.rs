//! Deterministic seed derivation.
//!
//! A single master seed fans out to every randomized component (client
//! training, cluster initialization, k-means restarts, grid-search points,
//! fleet synthesis). Derivation hashes the master seed together with a list
//! of string parts, so adding or removing clients never shifts the seeds of
//! unrelated components.

use sha2::{Digest, Sha256};

/// Derives a sub-seed from `master` and a label path.
///
/// The scheme is SHA-256 over the little-endian master seed followed by each
/// part separated by a unit-separator byte; the first eight digest bytes are
/// read as a little-endian u64. Stable across platforms and releases.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seed used for one client's local training (shared by the federated and
/// local schemes so matched master seeds give matched trajectories).
pub fn client_train_seed(master: u64, client_id: &str) -> u64 {
    derive_seed(master, &["client-train", client_id])
}

/// Seed for the server-side weight initialization of one cluster.
pub fn cluster_init_seed(master: u64, cluster: usize) -> u64 {
    derive_seed(master, &["cluster-init", &cluster.to_string()])
}
