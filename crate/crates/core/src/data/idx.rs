//! IDX file reader (big-endian magic, big-endian u32 dimension sizes,
//! then raw unsigned bytes).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadIdx { path: path.display().to_string(), reason: reason.into() }
}

fn read_u32_be(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Images and labels with pixels scaled to `[0, 1]` by dividing by 255.
pub struct LabeledImages {
    /// `[N, rows*cols]`, row-major pixels.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages> {
    // images: magic 0x00000803, then count, rows, cols
    let mut r = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut r).map_err(|_| bad(images_path, "short header"))?;
    if magic != MAGIC_IMAGES {
        return Err(bad(images_path, format!("magic {magic:#010x}, want {MAGIC_IMAGES:#010x}")));
    }
    let n = read_u32_be(&mut r).map_err(|_| bad(images_path, "short header"))? as usize;
    let rows = read_u32_be(&mut r).map_err(|_| bad(images_path, "short header"))? as usize;
    let cols = read_u32_be(&mut r).map_err(|_| bad(images_path, "short header"))? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    r.read_exact(&mut raw)
        .map_err(|_| bad(images_path, format!("expected {} pixel bytes", raw.len())))?;
    let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::matrix(n, rows * cols, data)?;

    // labels: magic 0x00000801, then count
    let mut r = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut r).map_err(|_| bad(labels_path, "short header"))?;
    if magic != MAGIC_LABELS {
        return Err(bad(labels_path, format!("magic {magic:#010x}, want {MAGIC_LABELS:#010x}")));
    }
    let ln = read_u32_be(&mut r).map_err(|_| bad(labels_path, "short header"))? as usize;
    if ln != n {
        return Err(bad(labels_path, format!("{ln} labels for {n} images")));
    }
    let mut raw = vec![0u8; ln];
    r.read_exact(&mut raw).map_err(|_| bad(labels_path, "truncated labels"))?;
    let labels = raw.into_iter().map(|b| b as usize).collect();
    Ok(LabeledImages { images, labels, rows, cols })
}

/// Conventional MNIST file names under one directory.
pub fn mnist_paths(dir: &Path) -> [(std::path::PathBuf, std::path::PathBuf); 2] {
    [
        (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")),
        (dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::tempdir;

    fn write_images(path: &Path, n: u32, rows: u32, cols: u32, pixels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&MAGIC_IMAGES.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&MAGIC_LABELS.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn loads_and_scales() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_images(&ip, 2, 2, 2, &[0, 255, 128, 0, 255, 255, 0, 1]);
        write_labels(&lp, &[3, 7]);
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.images.shape(), &[2, 4]);
        assert_eq!(set.images.data()[0], 0.0);
        assert_eq!(set.images.data()[1], 1.0);
        assert_eq!(set.labels, vec![3, 7]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, 0x0000_0801u32.to_be_bytes()).unwrap();
        write_labels(&lp, &[0]);
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_images(&ip, 1, 1, 1, &[0]);
        write_labels(&lp, &[0, 1]);
        assert!(load_idx(&ip, &lp).is_err());
    }
}
