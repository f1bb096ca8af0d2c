//! CIFAR-10 binary batches: records of one label byte and 3×32×32 pixel
//! bytes in channel-major order.

use std::path::PathBuf;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Concatenates the records of every file in `paths`, pixels scaled to `[0, 1]`.
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD_BYTES}",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            if rec[0] > 9 {
                return Err(Error::Format(format!("{}: label byte {} out of range", path.display(), rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("no CIFAR-10 files given".into()));
    }
    let images = Tensor::new(&[labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10)
}
