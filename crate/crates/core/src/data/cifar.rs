use std::path::Path;

use super::{Dataset, Split};
use crate::error::DataError;
use crate::tensor::Tensor;

const RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 binary batches: records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue pixel bytes.
pub fn load_cifar10<P: AsRef<Path>>(batches: &[P]) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batches {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(DataError::CifarFraming {
                path: path.to_path_buf(),
                len: bytes.len(),
            });
        }
        for record in bytes.chunks_exact(RECORD) {
            labels.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("no CIFAR-10 batch files given".into()));
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new("cifar10", Split::Train, images, labels, 10)
}
