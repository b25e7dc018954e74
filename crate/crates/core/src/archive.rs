//! Versioned single-file tensor archive.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes
//! version    u32
//! header_len u64
//! header     JSON {"dtype", "meta", "tensors": [{"key", "shape"}]}
//! payload    tensors in header order, dtype-width elements each
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub struct ArchiveWriter {
    magic: [u8; 8],
    dtype: &'static str,
    meta: serde_json::Value,
    entries: Vec<Entry>,
    payload: Vec<u8>,
}

impl ArchiveWriter {
    pub fn new<T: Scalar>(magic: [u8; 8], meta: &impl Serialize) -> Result<Self> {
        Ok(Self {
            magic,
            dtype: T::DTYPE,
            meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            entries: Vec::new(),
            payload: Vec::new(),
        })
    }

    pub fn tensor<T: Scalar>(&mut self, key: impl Into<String>, t: &Tensor<T>) -> &mut Self {
        debug_assert_eq!(T::DTYPE, self.dtype);
        self.entries.push(Entry { key: key.into(), shape: t.shape().to_vec() });
        self.payload.extend_from_slice(&t.le_bytes());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            dtype: self.dtype.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|e| Entry { key: e.key.clone(), shape: e.shape.clone() })
                .collect(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.payload.len());
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub struct ArchiveReader {
    dtype: String,
    meta: serde_json::Value,
    entries: Vec<(Entry, usize)>,
    payload: Vec<u8>,
}

impl ArchiveReader {
    pub fn open(path: &Path, magic: [u8; 8]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes, magic)
    }

    pub fn from_bytes(bytes: Vec<u8>, magic: [u8; 8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || bytes[..8] != magic {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let mut offset = 0;
        let mut entries = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            entries.push((e, offset));
            offset += n * width;
        }
        let payload = bytes[header_end..].to_vec();
        if payload.len() != offset {
            return Err(Error::Checkpoint(format!("payload is {} bytes, header describes {offset}", payload.len())));
        }
        Ok(Self { dtype: header.dtype, meta: header.meta, entries, payload })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(e, _)| e.key.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys().any(|k| k == key)
    }

    /// Reads a tensor, converting from the stored dtype when it differs.
    pub fn tensor<T: Scalar>(&self, key: &str) -> Result<Tensor<T>> {
        let (e, offset) = self
            .entries
            .iter()
            .find(|(e, _)| e.key == key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        let n: usize = e.shape.iter().product();
        let raw = &self.payload[*offset..];
        let data = match self.dtype.as_str() {
            "f32" => (0..n).map(|i| T::lit(f32::read_le(&raw[i * 4..]) as f64)).collect(),
            _ => (0..n).map(|i| T::lit(f64::read_le(&raw[i * 8..]))).collect(),
        };
        Tensor::from_vec(e.shape.clone(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: [u8; 8] = *b"TESTARC\0";

    #[test]
    fn round_trip_and_dtype_conversion() {
        let a = Tensor::<f32>::from_vec([2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::<f32>::from_vec([3], vec![7.0, 8.0, 9.0]).unwrap();
        let mut w = ArchiveWriter::new::<f32>(MAGIC, &serde_json::json!({"epoch": 3})).unwrap();
        w.tensor("a", &a).tensor("b", &b);
        let r = ArchiveReader::from_bytes(w.to_bytes(), MAGIC).unwrap();
        assert_eq!(r.tensor::<f32>("a").unwrap(), a);
        assert_eq!(r.tensor::<f64>("b").unwrap().data(), &[7.0, 8.0, 9.0]);
        assert_eq!(r.meta::<serde_json::Value>().unwrap()["epoch"], 3);
        assert!(r.tensor::<f32>("c").is_err());
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let w = ArchiveWriter::new::<f64>(MAGIC, &()).unwrap();
        let bytes = w.to_bytes();
        assert!(ArchiveReader::from_bytes(bytes.clone(), *b"OTHER\0\0\0").is_err());
        let mut w = ArchiveWriter::new::<f64>(MAGIC, &()).unwrap();
        w.tensor("x", &Tensor::<f64>::zeros([4]));
        let mut bytes = w.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(ArchiveReader::from_bytes(bytes, MAGIC).is_err());
    }
}
