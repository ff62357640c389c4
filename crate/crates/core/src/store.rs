//! Manifest + blob tensor container shared by checkpoints and datasets.
//!
//! A container is a JSON manifest describing named tensors (shape, dtype,
//! byte offset, byte length) and a single little-endian binary blob. The
//! manifest also records the blob length and its SHA-256, so truncation and
//! corruption are reported instead of silently decoded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub bytes: u64,
}

/// Blob description stored in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobIndex {
    pub file: String,
    pub length: u64,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) {
        let offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.finish_entry(name, shape, DType::F64, offset);
    }

    pub fn push_u8(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = u8>) {
        let offset = self.bytes.len() as u64;
        self.bytes.extend(data);
        self.finish_entry(name, shape, DType::U8, offset);
    }

    fn finish_entry(&mut self, name: &str, shape: &[usize], dtype: DType, offset: u64) {
        let bytes = self.bytes.len() as u64 - offset;
        debug_assert_eq!(bytes as usize, shape.iter().product::<usize>() * dtype.size());
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype,
            offset,
            bytes,
        });
    }

    /// Writes the blob next to the manifest location and returns its index.
    pub fn write(self, dir: &Path, file: &str) -> Result<BlobIndex> {
        let path = dir.join(file);
        fs::write(&path, &self.bytes).map_err(|e| Error::io(&path, e))?;
        Ok(BlobIndex {
            file: file.to_string(),
            length: self.bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&self.bytes)),
            tensors: self.entries,
        })
    }
}

/// Verified blob contents.
#[derive(Debug)]
pub struct BlobReader {
    bytes: Vec<u8>,
    index: BlobIndex,
}

impl BlobReader {
    pub fn open(dir: &Path, index: BlobIndex) -> Result<Self> {
        let path = dir.join(&index.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != index.length {
            return Err(Error::Integrity(format!(
                "{} holds {} bytes, manifest expects {}",
                path.display(),
                bytes.len(),
                index.length
            )));
        }
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != index.sha256 {
            return Err(Error::Integrity(format!(
                "{} checksum mismatch",
                path.display()
            )));
        }
        for t in &index.tensors {
            let expect = t.shape.iter().product::<usize>() * t.dtype.size();
            if t.bytes as usize != expect || t.offset + t.bytes > index.length {
                return Err(Error::Integrity(format!("tensor {} has a bad extent", t.name)));
            }
        }
        Ok(Self { bytes, index })
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.index.tensors
    }

    fn entry(&self, name: &str, dtype: DType) -> Result<&TensorEntry> {
        let e = self
            .index
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))?;
        if e.dtype != dtype {
            return Err(Error::Manifest(format!("tensor {name} is {:?}", e.dtype)));
        }
        Ok(e)
    }

    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let e = self.entry(name, DType::F64)?;
        let raw = &self.bytes[e.offset as usize..(e.offset + e.bytes) as usize];
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((e.shape.clone(), data))
    }

    pub fn u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let e = self.entry(name, DType::U8)?;
        let raw = &self.bytes[e.offset as usize..(e.offset + e.bytes) as usize];
        Ok((e.shape.clone(), raw.to_vec()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = BlobWriter::new();
        w.push_f64("a", &[2, 2], [1.0, -0.0, f64::MIN_POSITIVE, 3.5]);
        w.push_u8("b", &[3], [1, 2, 3]);
        let index = w.write(dir.path(), "blob.bin").unwrap();
        let r = BlobReader::open(dir.path(), index.clone()).unwrap();
        let (shape, a) = r.f64("a").unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(a[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.u8("b").unwrap().1, vec![1, 2, 3]);
        assert!(r.u8("a").is_err());
        assert!(r.f64("missing").is_err());

        let path = dir.path().join("blob.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(BlobReader::open(dir.path(), index.clone()), Err(Error::Integrity(_))));
        let mut flipped = bytes.clone();
        flipped[0] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(BlobReader::open(dir.path(), index), Err(Error::Integrity(_))));
    }
}
