//! Local gradient noising baselines: Gaussian and Laplace mechanisms, with
//! optional ℓ2 clipping applied first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientVector;
use crate::rng::{self, Gaussian};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Gaussian,
    Laplace,
    None,
}

/// Noise added to each client's gradient before upload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mechanism: Mechanism,
    /// Gaussian standard deviation or Laplace scale `b`.
    pub scale: f64,
    /// ℓ2 clip bound applied before noising.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            mechanism: Mechanism::Gaussian,
            scale: sigma,
            clip: None,
        }
    }

    pub fn laplace(b: f64) -> Self {
        Self {
            mechanism: Mechanism::Laplace,
            scale: b,
            clip: None,
        }
    }

    pub fn with_clip(mut self, c: f64) -> Self {
        self.clip = Some(c);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("noise scale must be >= 0, got {}", self.scale)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip bound must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Rescales `g` to ℓ2 norm `c` if it is longer, over the flattened vector.
pub fn clip_gradient(g: &GradientVector, c: f64) -> GradientVector {
    let norm = g.l2_norm();
    if norm <= c {
        return g.clone();
    }
    let mut factor = c / norm;
    loop {
        let clipped = g.map(move |v| v * factor);
        // Rounding can leave the result a few ulps above c.
        if clipped.l2_norm() <= c {
            return clipped;
        }
        factor *= 1.0 - 4.0 * f64::EPSILON;
    }
}

/// `g + ζ` with `ζ` drawn i.i.d. per component from the mechanism.
pub fn add_noise<R: Rng + ?Sized>(g: &GradientVector, spec: &NoiseSpec, rng: &mut R) -> GradientVector {
    if spec.scale == 0.0 || spec.mechanism == Mechanism::None {
        return g.clone();
    }
    let mut gauss = Gaussian::new();
    let tensors = g
        .tensors()
        .iter()
        .map(|t| {
            let mut out = t.clone();
            for v in out.data_mut() {
                *v += match spec.mechanism {
                    Mechanism::Gaussian => spec.scale * gauss.sample(rng),
                    Mechanism::Laplace => rng::laplace(rng, spec.scale),
                    Mechanism::None => 0.0,
                };
            }
            out
        })
        .collect();
    GradientVector::new(tensors)
}

/// Clips (when a bound is set) and then noises.
pub fn privatize<R: Rng + ?Sized>(g: &GradientVector, spec: &NoiseSpec, rng: &mut R) -> GradientVector {
    match spec.clip {
        Some(c) => add_noise(&clip_gradient(g, c), spec, rng),
        None => add_noise(g, spec, rng),
    }
}
