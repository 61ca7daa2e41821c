//! Seed plumbing: one global seed, named sub-seeds per pipeline stage so each
//! component is independently reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a named sub-seed from the global seed. Stable across platforms.
pub fn subseed(global: u64, domain: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update(domain.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng_for(global: u64, domain: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(global, domain))
}

/// Standard normal sample via Box-Muller.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
