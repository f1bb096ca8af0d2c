//! IDX files as used by MNIST: big-endian header, `u8` payload, optionally
//! gzip-compressed (detected from the leading bytes).

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Dataset;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Header dims and payload of an IDX file with the given magic.
fn parse(bytes: &[u8], magic: u32, rank: usize, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let fail = |what: String| Error::Format(format!("{}: {what}", path.display()));
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != magic {
        return Err(fail(format!("bad magic {:#010x}, expected {magic:#010x}", word(0))));
    }
    let dims: Vec<usize> = (1..=rank).map(|i| word(i) as usize).collect();
    let len: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != len {
        return Err(fail(format!("header promises {len} bytes of data, found {}", payload.len())));
    }
    Ok((dims, payload.to_vec()))
}

/// Loads an image file (`N×H×W`) and its label file. Pixels are scaled to
/// `[0, 1]`; the class count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (dims, pixels) = parse(&read_file(images)?, IMAGES_MAGIC, 3, images)?;
    let (ldims, raw_labels) = parse(&read_file(labels)?, LABELS_MAGIC, 1, labels)?;
    if dims[0] != ldims[0] {
        return Err(Error::Format(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            dims[0],
            labels.display(),
            ldims[0]
        )));
    }
    if dims[0] == 0 {
        return Err(Error::Format(format!("{}: no images", images.display())));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let tensor = Tensor::new(&[dims[0], 1, dims[1], dims[2]], data)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(tensor, labels, classes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a single-channel dataset as IDX, gzip-compressed when the path
/// ends in `.gz`. Pixels are stored as `round(255·x)`.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let &[n, 1, h, w] = dataset.images().shape() else {
        return Err(dim_err!("IDX images must be N×1×H×W, got {:?}", dataset.images().shape()));
    };
    if dataset.classes() > 256 {
        return Err(dim_err!("IDX labels are single bytes"));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.images().data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(dataset.labels().iter().map(|&y| y as u8));
    write_file(images, &img)?;
    write_file(labels, &lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Dataset {
        let pixels: Vec<f32> = (0..2 * 3 * 4).map(|i| (i * 10 % 256) as f32 / 255.0).collect();
        Dataset::new(Tensor::new(&[2, 1, 3, 4], pixels).unwrap(), vec![7, 2], 10).unwrap()
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let d = fixture();
        for ext in ["", ".gz"] {
            let ip = dir.path().join(format!("img{ext}"));
            let lp = dir.path().join(format!("lab{ext}"));
            write_idx(&d, &ip, &lp).unwrap();
            let back = load_idx(&ip, &lp).unwrap().with_classes(10).unwrap();
            assert!(back.images().bit_eq(d.images()));
            assert_eq!(back.labels(), d.labels());
        }
        let raw = std::fs::read(dir.path().join("img")).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx(&d, &ip, &lp).unwrap();
        let good = std::fs::read(&ip).unwrap();

        let bad = dir.path().join("bad");
        std::fs::write(&bad, &good[..good.len() - 1]).unwrap();
        assert!(matches!(load_idx(&bad, &lp), Err(Error::Format(_))));
        std::fs::write(&bad, &good[..6]).unwrap();
        assert!(matches!(load_idx(&bad, &lp), Err(Error::Format(_))));
        assert!(matches!(load_idx(&lp, &lp), Err(Error::Format(_))));

        let one = Dataset::new(Tensor::zeros(&[1, 1, 3, 4]).unwrap(), vec![0], 2).unwrap();
        let lp1 = dir.path().join("lab1");
        write_idx(&one, &dir.path().join("img1"), &lp1).unwrap();
        assert!(matches!(load_idx(&ip, &lp1), Err(Error::Format(_))));

        match load_idx(&dir.path().join("missing"), &lp) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("missing")),
            other => panic!("{other:?}"),
        }
    }
}
