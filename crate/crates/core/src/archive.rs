//! Flat tensor archive: an 8-byte magic, a little-endian `u64` manifest
//! length, a JSON manifest, then the concatenated little-endian tensor data.
//!
//! The manifest is `{"metadata": <any>, "tensors": [{name, shape, dtype,
//! offset, nbytes}]}` with offsets relative to the start of the data block.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use mdt_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDTARCH1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory archive. Tensors keep insertion order.
#[derive(Clone, Debug)]
pub struct Archive {
    pub metadata: serde_json::Value,
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl Default for Archive {
    fn default() -> Self {
        Self::new(serde_json::Value::Null)
    }
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, entries: Vec::new(), blob: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let offset = self.blob.len();
        for &v in t.as_slice() {
            v.write_le(&mut self.blob);
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            nbytes: self.blob.len() - offset,
        });
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Reads a tensor, converting from the stored dtype.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        let e = self.entry(name)?;
        let bytes = &self.blob[e.offset..e.offset + e.nbytes];
        let data: Vec<T> = match e.dtype.as_str() {
            "f32" => bytes.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            "f64" => bytes.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
            _ => return None,
        };
        Tensor::from_vec(&e.shape, data).ok()
    }

    /// All tensors by name, converted to `T`.
    pub fn tensors<T: Scalar>(&self) -> BTreeMap<String, Tensor<T>> {
        self.entries.iter().filter_map(|e| Some((e.name.clone(), self.tensor(&e.name)?))).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&Manifest { metadata: self.metadata.clone(), tensors: self.entries.clone() })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Archive { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
        let blob = bytes[16 + len..].to_vec();
        for e in &manifest.tensors {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(bad(&format!("tensor {} has unsupported dtype {other}", e.name))),
            };
            let numel: usize = e.shape.iter().product();
            if e.nbytes != numel * width || e.offset + e.nbytes > blob.len() {
                return Err(bad(&format!("tensor {} has inconsistent extent", e.name)));
            }
        }
        Ok(Self { metadata: manifest.metadata, entries: manifest.tensors, blob })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}
