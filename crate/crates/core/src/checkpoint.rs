//! Named tensor archive: the crate's checkpoint container.
//!
//! Layout: an 8-byte little-endian manifest length, a JSON manifest
//! (format version 1; per tensor: name, shape, dtype `"f64"`, byte offset
//! and length into the blob), then the raw blob of little-endian 8-byte
//! floats. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadCheckpoint { path: path.display().to_string(), reason: reason.into() }
}

/// Write `(name, tensor)` pairs; iteration order is preserved in the
/// manifest, offsets ascend through the blob.
pub fn save<'a, I>(path: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            length: (t.len() * 8) as u64,
        });
    }
    let manifest = serde_json::to_vec(&Manifest { version: FORMAT_VERSION, tensors: entries })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    save(path, store.iter())
}

/// Read back all tensors in manifest order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| bad(path, "missing manifest length"))?;
    let manifest_len = u64::from_le_bytes(len_bytes);
    if manifest_len + 8 > file_len {
        return Err(bad(path, "manifest length exceeds file size"));
    }
    let mut manifest_bytes = vec![0u8; manifest_len as usize];
    r.read_exact(&mut manifest_bytes)
        .map_err(|_| bad(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| bad(path, format!("manifest parse: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported version {}", manifest.version)));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(bad(path, format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
        if end > blob.len() || e.length % 8 != 0 {
            return Err(bad(path, format!("tensor {}: bad blob range", e.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data)
            .map_err(|err| bad(path, format!("tensor {}: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok(out)
}

/// Load an archive into a fresh store.
pub fn load_store(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in load(path)? {
        store.insert(&name, t)?;
    }
    Ok(store)
}

/// Merge an archive into an existing store under a required name prefix.
pub fn load_into(path: &Path, store: &mut ParamStore, required_prefix: &str) -> Result<()> {
    for (name, t) in load(path)? {
        if !name.starts_with(required_prefix) {
            return Err(bad(
                path,
                format!("tensor {} lacks expected prefix {}", name, required_prefix),
            ));
        }
        store.insert(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.nta");
        // values chosen to stress exact bit patterns
        let a = Tensor::from_vec(vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]);
        let b = Tensor::matrix(2, 2, vec![1e300, -1e-300, 0.0, 42.5]).unwrap();
        save(&path, [("x/a", &a), ("y/b", &b)]).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "x/a");
        for (orig, loaded) in a.data().iter().zip(back[0].1.data()) {
            assert_eq!(orig.to_bits(), loaded.to_bits());
        }
        assert_eq!(back[1].1.shape(), &[2, 2]);
        for (orig, loaded) in b.data().iter().zip(back[1].1.data()) {
            assert_eq!(orig.to_bits(), loaded.to_bits());
        }
    }

    #[test]
    fn store_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.nta");
        let mut store = ParamStore::new();
        store.insert("m/w", Tensor::from_vec(vec![1.5, 2.5])).unwrap();
        store.insert("m/b", Tensor::from_vec(vec![-0.5])).unwrap();
        save_store(&path, &store).unwrap();
        let back = load_store(&path).unwrap();
        assert_eq!(back.fingerprint(), store.fingerprint());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not an archive").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn prefix_check_on_merge() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.nta");
        let t = Tensor::from_vec(vec![1.0]);
        save(&path, [("other/w", &t)]).unwrap();
        let mut store = ParamStore::new();
        assert!(load_into(&path, &mut store, "vib/").is_err());
    }
}
