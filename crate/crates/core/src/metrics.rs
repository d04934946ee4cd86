//! Utility and reconstruction-quality metrics.
//!
//! Image metrics work on the `[0, 1]` pixel scale with a peak value of 1.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormalizationTransform};
use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 1000;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of argmax predictions that match the labels.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.len() / labels.len();
    let correct = logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Classification accuracy of `params` on `ds`.
pub fn accuracy(params: &ParameterSet, ds: &Dataset, transform: &NormalizationTransform) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Config("accuracy of an empty dataset".into()));
    }
    let mut correct = 0.0;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let x = transform.apply(&ds.images().slice_rows(start, end))?;
        let logits = params.logits(&x)?;
        correct += accuracy_from_logits(&logits, &ds.labels()[start..end]) * (end - start) as f64;
        start = end;
    }
    Ok(correct / ds.len() as f64)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// MSE between the last-hidden-layer activations of two pixel-scale
/// batches under `params`.
pub fn feature_mse(
    params: &ParameterSet,
    transform: &NormalizationTransform,
    original: &Tensor,
    reconstruction: &Tensor,
) -> Result<f64> {
    same_shape(original, reconstruction)?;
    let fa = params.penultimate_features(&transform.apply(original)?)?;
    let fb = params.penultimate_features(&transform.apply(reconstruction)?)?;
    mse(&fa, &fb)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &k {
        for b in &k {
            w.push(a * b / (total * total));
        }
    }
    w
}

fn ssim_stats(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let mu_a: f64 = a.iter().zip(w).map(|(x, k)| x * k).sum();
    let mu_b: f64 = b.iter().zip(w).map(|(x, k)| x * k).sum();
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for ((x, y), k) in a.iter().zip(b).zip(w) {
        let (dx, dy) = (x - mu_a, y - mu_b);
        va += k * dx * dx;
        vb += k * dy * dy;
        cov += k * dx * dy;
    }
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2))
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let uniform = vec![1.0 / (h * w) as f64; h * w];
        return ssim_stats(a, b, &uniform);
    }
    let win = gaussian_window();
    let mut pa = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut pb = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            for r in 0..SSIM_WINDOW {
                let src = (y + r) * w + x;
                pa[r * SSIM_WINDOW..(r + 1) * SSIM_WINDOW].copy_from_slice(&a[src..src + SSIM_WINDOW]);
                pb[r * SSIM_WINDOW..(r + 1) * SSIM_WINDOW].copy_from_slice(&b[src..src + SSIM_WINDOW]);
            }
            total += ssim_stats(&pa, &pb, &win);
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM of two images shaped `[c, h, w]` or `[1, c, h, w]`, averaged
/// over channels. Images smaller than the 11×11 window use one global
/// window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    let (c, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::Config(format!("ssim expects a single image, got shape {s:?}"))),
    };
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|k| {
            let r = k * plane..(k + 1) * plane;
            ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w)
        })
        .sum();
    Ok(total / c as f64)
}

/// One row of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub test_acc: f64,
    pub val_acc: f64,
    pub test_mse: f64,
    pub fea_mse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl MetricReport {
    pub const HEADER: [&'static str; 6] = ["test_acc", "val_acc", "test_mse", "fea_mse", "ssim", "psnr"];

    pub fn values(&self) -> [f64; 6] {
        [self.test_acc, self.val_acc, self.test_mse, self.fea_mse, self.ssim, self.psnr]
    }

    /// Values formatted for CSV; an infinite PSNR is written as `inf`.
    pub fn fields(&self) -> Vec<String> {
        self.values().iter().map(|&v| format_metric(v)).collect()
    }
}

/// Fixed-precision rendering used by every CSV the harness writes.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}
