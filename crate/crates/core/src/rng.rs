//! Named random streams derived from one master seed.
//!
//! A stream is identified by a name and a path of integers (client id,
//! round, restart, ...). Its seed is a hash of `(master, name, path)`, so
//! streams are independent of how many other streams exist or the order in
//! which they are created.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha12Rng;

pub const INIT: &str = "init";
pub const PARTITION: &str = "partition";
pub const SELECTION: &str = "selection";
pub const BATCH: &str = "batch";
pub const PERTURBATION: &str = "perturbation";
pub const NOISE: &str = "noise";
pub const PROBE_NOISE: &str = "probe-noise";
pub const ATTACK: &str = "attack";
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, name: &str, path: &[u64]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for p in path {
            h.update(p.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn rng(&self, name: &str, path: &[u64]) -> StreamRng {
        StreamRng::from_seed(self.seed(name, path))
    }
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Standard normal draws via the Box–Muller transform. Keeps the second
/// variate of each pair for the next call.
#[derive(Clone, Debug, Default)]
pub struct Gaussian {
    spare: Option<f64>,
}

impl Gaussian {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Laplace(0, `scale`) draw by inverting the CDF.
pub fn laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    // u in (-1/2, 1/2); the endpoint -1/2 would give ln(0).
    let u = loop {
        let u = rng.gen::<f64>() - 0.5;
        if u > -0.5 {
            break u;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}
