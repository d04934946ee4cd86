//! Datasets, client partitioning and input normalization.

mod cifar;
mod idx;
mod normalize;
mod partition;
mod synth;

pub use cifar::load_cifar10;
pub use idx::{load_idx, read_maybe_gzip};
pub use normalize::NormalizationTransform;
pub use partition::{partition_iid, ClientShard};
pub use synth::{synth_blobs, synth_image};

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled images with pixel values in `[0, 1]`, shaped `[n, channels, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    split: Split,
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("pixel values outside [0, 1]".into()));
        }
        Ok(Self {
            name: name.into(),
            split,
            images,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, h, w]`
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            split: self.split,
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Splits off the last `fraction` of the samples as a validation set.
    pub fn split_validation(&self, fraction: f64) -> Result<(Self, Self), DataError> {
        let n_val = (self.len() as f64 * fraction).round() as usize;
        if n_val == 0 || n_val >= self.len() {
            return Err(DataError::Invalid(format!(
                "validation fraction {fraction} leaves an empty split of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - n_val;
        let train = self.subset(&(0..cut).collect::<Vec<_>>());
        let val = self
            .subset(&(cut..self.len()).collect::<Vec<_>>())
            .with_split(Split::Val);
        Ok((train, val))
    }
}
