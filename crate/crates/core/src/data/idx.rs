use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Split};
use crate::error::DataError;
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently inflating it when it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            detail: "header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Loads an IDX image/label file pair (optionally gzip-compressed).
///
/// Pixels are scaled by 1/255. The returned dataset is tagged `train`
/// with ten classes; use [`Dataset::with_name`] / [`Dataset::with_split`]
/// to relabel it.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let img = read_maybe_gzip(images)?;
    check_magic(&img, IMAGES_MAGIC, images)?;
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let body = &img[16.min(img.len())..];
    let need = n * rows * cols;
    if body.len() < need || rows == 0 || cols == 0 {
        return Err(DataError::Truncated {
            path: images.to_path_buf(),
            detail: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }

    let lab = read_maybe_gzip(labels)?;
    check_magic(&lab, LABELS_MAGIC, labels)?;
    let n_labels = be_u32(&lab, 4, labels)? as usize;
    let lbody = &lab[8.min(lab.len())..];
    if lbody.len() < n_labels {
        return Err(DataError::Truncated {
            path: labels.to_path_buf(),
            detail: format!("expected {n_labels} label bytes, found {}", lbody.len()),
        });
    }
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    if n == 0 {
        return Err(DataError::Invalid(format!("{} holds no images", images.display())));
    }

    let pixels = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    let images_t = Tensor::new(vec![n, 1, rows, cols], pixels)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels_v = lbody[..n].iter().map(|&b| b as usize).collect();
    Dataset::new("idx", Split::Train, images_t, labels_v, 10)
}
