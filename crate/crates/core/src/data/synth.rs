use rand::seq::SliceRandom;

use super::{Dataset, Split};
use crate::error::DataError;
use crate::rng::{self, Gaussian, Streams};
use crate::tensor::Tensor;

const CENTER_RADIUS: f64 = 4.0;
const BLOB_STD: f64 = 0.5;

/// Gaussian blobs, one per class, rescaled into `[0, 1]` and shuffled.
///
/// Class `k` is centred on axis `k mod dims` (alternating sign every `dims`
/// classes) so that distinct classes are well separated. Images have shape
/// `[1, 1, dims]`.
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, seed: u64) -> Result<Dataset, DataError> {
    if dims < 2 || classes < 2 || per_class == 0 {
        return Err(DataError::Invalid(format!(
            "synthetic blobs need dims >= 2, classes >= 2 and per_class >= 1 \
             (got {dims}, {classes}, {per_class})"
        )));
    }
    if classes > 2 * dims {
        return Err(DataError::Invalid(format!(
            "at most {} classes fit in {dims} dimensions",
            2 * dims
        )));
    }
    let streams = Streams::new(seed);
    let mut rng = streams.rng(rng::SYNTHETIC, &[0]);
    let mut gauss = Gaussian::new();

    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mut center = vec![0.0; dims];
        center[class % dims] = if class < dims { CENTER_RADIUS } else { -CENTER_RADIUS };
        for _ in 0..per_class {
            let x = center.iter().map(|c| c + BLOB_STD * gauss.sample(&mut rng)).collect();
            rows.push((x, class));
        }
    }
    rows.shuffle(&mut streams.rng(rng::SYNTHETIC, &[1]));

    let (lo, hi) = rows
        .iter()
        .flat_map(|(x, _)| x.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let n = rows.len();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (x, label) in rows {
        data.extend(x.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)));
        labels.push(label);
    }
    let images = Tensor::new(vec![n, 1, 1, dims], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new("synthetic", Split::Train, images, labels, classes)
}

/// A smooth random `[1, channels, size, size]` image in `[0, 1]`: a sum of a
/// few random Gaussian bumps, rescaled.
pub fn synth_image(channels: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = Streams::new(seed).rng(rng::SYNTHETIC, &[2]);
    let mut data = vec![0.0; channels * size * size];
    for c in 0..channels {
        let plane = &mut data[c * size * size..(c + 1) * size * size];
        for _ in 0..4 {
            let cx = rng::uniform(&mut rng, 0.0, size as f64);
            let cy = rng::uniform(&mut rng, 0.0, size as f64);
            let w = rng::uniform(&mut rng, 1.5, size as f64 / 3.0);
            let a = rng::uniform(&mut rng, 0.3, 1.0);
            for y in 0..size {
                for x in 0..size {
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    plane[y * size + x] += a * (-r2 / (2.0 * w * w)).exp();
                }
            }
        }
        let max = plane.iter().copied().fold(0.0, f64::max).max(1e-12);
        plane.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Tensor::from_parts(vec![1, channels, size, size], data)
}
