//! Named-array archive used for checkpoints and feature files.
//!
//! Layout of an archive file (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "DMARCHV1"
//! offset 8   u64       manifest length M in bytes
//! offset 16  M bytes   UTF-8 JSON manifest
//! offset 16+M          payload: arrays back to back, 8 bytes per element
//! ```
//!
//! The manifest is
//! `{"version":1,"meta":{..},"arrays":[{"name","dtype","shape","offset","length"}]}`
//! where `dtype` is `"f64"` or `"i64"`, `offset` is the byte offset of the
//! array inside the payload and `length` its element count. Arrays are
//! written in name order, so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DemoError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DMARCHV1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F64 { shape, .. } | ArrayData::I64 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64 { .. } => "f64",
            ArrayData::I64 { .. } => "i64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64 { data, .. } => data.len(),
            ArrayData::I64 { data, .. } => data.len(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: BTreeMap<String, String>,
    arrays: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, ArrayData>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.insert(
            name.into(),
            ArrayData::F64 {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), ArrayData::F64 { shape, data });
    }

    pub fn insert_i64(&mut self, name: impl Into<String>, data: Vec<i64>) {
        let shape = vec![data.len()];
        self.arrays.insert(name.into(), ArrayData::I64 { shape, data });
    }

    /// A stored float array as a rank-3 tensor. Arrays of lower rank are
    /// left-padded with unit axes.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.arrays.get(name) {
            Some(ArrayData::F64 { shape, data }) => {
                if shape.len() > 3 {
                    return Err(DemoError::Checkpoint(format!(
                        "{name}: rank {} exceeds 3",
                        shape.len()
                    )));
                }
                let mut s = [1usize; 3];
                s[3 - shape.len()..].copy_from_slice(shape);
                Ok(Tensor::from_vec(s, data.clone()))
            }
            Some(_) => Err(DemoError::Checkpoint(format!("{name}: expected f64 array"))),
            None => Err(DemoError::Checkpoint(format!("missing array {name}"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<&[i64]> {
        match self.arrays.get(name) {
            Some(ArrayData::I64 { data, .. }) => Ok(data),
            Some(_) => Err(DemoError::Checkpoint(format!("{name}: expected i64 array"))),
            None => Err(DemoError::Checkpoint(format!("missing array {name}"))),
        }
    }

    /// All float arrays under `prefix` as tensors keyed by the remainder of
    /// their names.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for name in self.arrays.keys() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest.to_string(), self.tensor(name)?);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut payload = Vec::new();
        for (name, arr) in &self.arrays {
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: arr.dtype().to_string(),
                shape: arr.shape().to_vec(),
                offset: payload.len(),
                length: arr.len(),
            });
            match arr {
                ArrayData::F64 { data, .. } => {
                    for v in data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArrayData::I64 { data, .. } => {
                    for v in data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let manifest = Manifest {
            version: VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DemoError::Checkpoint(format!("malformed archive: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(bad(&format!("unsupported version {}", manifest.version)));
        }
        let payload = &bytes[16 + mlen..];
        let mut arrays = BTreeMap::new();
        for e in manifest.arrays {
            if e.shape.iter().product::<usize>() != e.length {
                return Err(bad(&format!("{}: shape/length disagree", e.name)));
            }
            let raw = payload
                .get(e.offset..e.offset + 8 * e.length)
                .ok_or_else(|| bad(&format!("{}: payload out of range", e.name)))?;
            let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
            let arr = match e.dtype.as_str() {
                "f64" => ArrayData::F64 {
                    shape: e.shape,
                    data: words.map(f64::from_le_bytes).collect(),
                },
                "i64" => ArrayData::I64 {
                    shape: e.shape,
                    data: words.map(i64::from_le_bytes).collect(),
                },
                other => return Err(bad(&format!("{}: unknown dtype {other}", e.name))),
            };
            arrays.insert(e.name, arr);
        }
        Ok(Archive {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| DemoError::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| DemoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DemoError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
