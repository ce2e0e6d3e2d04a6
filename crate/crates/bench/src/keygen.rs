use std::fs;
use std::path::Path;

use pbft_core::crypto::{Keyring, SignatureAlgorithm};
use pbft_core::sim::client_id;

use crate::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeygenSummary {
    pub keypairs: usize,
    pub pairwise: usize,
}

/// Writes keys for replicas `0..n` and clients `1000..1000+clients`.
/// A non-empty `dir` is refused unless `force` is set.
pub fn keygen(
    n: u16,
    clients: usize,
    dir: &Path,
    algorithm: SignatureAlgorithm,
    seed: u64,
    force: bool,
) -> Result<KeygenSummary, BenchError> {
    if !force && dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(BenchError::Refused(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    let ids: Vec<_> = (0..clients).map(client_id).collect();
    let ring = Keyring::generate(algorithm, n, &ids, seed)?;
    ring.write_dir(dir)?;
    Ok(KeygenSummary {
        keypairs: ring.keypair_count(),
        pairwise: ring.pairwise_count(),
    })
}
