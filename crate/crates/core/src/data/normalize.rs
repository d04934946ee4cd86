use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{AutodiffError, DataError};
use crate::tensor::Tensor;

/// Per-channel standardization `t(x) = (clamp(x, 0, 1) - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormalizationTransform {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, DataError> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(DataError::Invalid(format!(
                "normalization needs one mean and std per channel, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(DataError::Invalid(format!("invalid normalization std {std:?}")));
        }
        Ok(Self { mean, std })
    }

    pub fn mnist() -> Self {
        Self::new(vec![0.1307], vec![0.3081]).unwrap()
    }

    pub fn fashion_mnist() -> Self {
        Self::new(vec![0.2860], vec![0.3530]).unwrap()
    }

    pub fn cifar10() -> Self {
        Self::new(vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]).unwrap()
    }

    /// Clamp only: mean 0, std 1 on every channel.
    pub fn identity(channels: usize) -> Self {
        Self::new(vec![0.0; channels], vec![1.0; channels]).unwrap()
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn per_feature(&self, values: &[f64], d: usize) -> Result<Vec<f64>, AutodiffError> {
        let c = self.channels();
        if d % c != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "normalize",
                lhs: vec![d],
                rhs: vec![c],
            });
        }
        let plane = d / c;
        Ok((0..d).map(|f| values[f / plane]).collect())
    }

    /// Records the transform of a pixel-space batch `x` (`[n, ...]`) in `g`,
    /// producing a flattened `[n, d]` node.
    pub fn apply_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = g.shape(x).to_vec();
        let n = shape[0];
        let d: usize = shape[1..].iter().product();
        let neg_mean: Vec<f64> = self.mean.iter().map(|m| -m).collect();
        let inv_std: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift = g.constant(Tensor::vector(&self.per_feature(&neg_mean, d)?));
        let scale = g.constant(Tensor::vector(&self.per_feature(&inv_std, d)?));
        let clamped = g.clamp(x, 0.0, 1.0)?;
        let flat = if shape.len() == 2 { clamped } else { g.reshape(clamped, &[n, d])? };
        let centered = g.add_row(flat, shift)?;
        g.mul_row(centered, scale)
    }

    /// Normalizes a pixel-space batch to a flattened `[n, d]` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let out = self.apply_node(&mut g, xin)?;
        Ok(g.value(out).clone())
    }

    /// Maps normalized values back to pixel scale (`x · std + mean`) without
    /// clamping. The result has the same shape as `x`, whose leading axis is
    /// the batch.
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let n = x.shape()[0];
        let d = x.len() / n;
        let std = self.per_feature(&self.std, d)?;
        let mean = self.per_feature(&self.mean, d)?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for ((v, s), m) in row.iter_mut().zip(&std).zip(&mean) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}
