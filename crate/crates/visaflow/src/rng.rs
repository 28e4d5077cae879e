//! Seeded randomness helpers.
//!
//! Every stochastic decision in the pipeline draws from a ChaCha8 stream
//! keyed by a hash of (namespace, parts), so independent components never
//! share a stream and results are stable across platforms.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Lowercase hex of a byte string.
pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Derive a 64-bit seed from a namespace string and integer parts.
pub fn derive_seed(namespace: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(namespace.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// A ChaCha8 stream keyed by (namespace, parts).
pub fn stream(namespace: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(namespace, parts))
}

/// Standard-normal draw via Box-Muller; two uniforms per pair of normals.
///
/// Kept in-crate so parameter initialization is bit-stable regardless of
/// upstream distribution-crate changes.
pub struct Normal {
    spare: Option<f64>,
}

impl Normal {
    pub fn new() -> Self {
        Normal { spare: None }
    }

    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        // u1 in (0, 1]: guard against ln(0).
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

impl Default for Normal {
    fn default() -> Self {
        Self::new()
    }
}

/// Fill a slice with N(0, std^2) draws.
pub fn fill_normal<R: Rng>(rng: &mut R, std: f64, out: &mut [f64]) {
    let mut n = Normal::new();
    for v in out.iter_mut() {
        *v = n.sample(rng) * std;
    }
}
