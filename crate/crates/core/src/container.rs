//! On-disk container: one directory holding `manifest.json` plus one raw
//! little-endian, row-major blob per named array.
//!
//! ```text
//! <dir>/manifest.json   {"kind": ..., "meta": {...}, "entries": [{"name", "dtype", "shape", "file"}]}
//! <dir>/<name>.bin      raw values, dtype one of float32 | float64 | int32 | int64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

impl Blob {
    pub fn dtype(&self) -> &'static str {
        match self {
            Blob::F32(_) => "float32",
            Blob::F64(_) => "float64",
            Blob::I32(_) => "int32",
            Blob::I64(_) => "int64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Blob::F32(v) => v.len(),
            Blob::F64(v) => v.len(),
            Blob::I32(v) => v.len(),
            Blob::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            Blob::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Blob::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Blob::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Blob::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: &str, bytes: &[u8]) -> Option<Blob> {
        fn chunks<const N: usize, V>(bytes: &[u8], f: fn([u8; N]) -> V) -> Option<Vec<V>> {
            if !bytes.len().is_multiple_of(N) {
                return None;
            }
            Some(bytes.chunks_exact(N).map(|c| f(c.try_into().unwrap())).collect())
        }
        match dtype {
            "float32" => chunks(bytes, f32::from_le_bytes).map(Blob::F32),
            "float64" => chunks(bytes, f64::from_le_bytes).map(Blob::F64),
            "int32" => chunks(bytes, i32::from_le_bytes).map(Blob::I32),
            "int64" => chunks(bytes, i64::from_le_bytes).map(Blob::I64),
            _ => None,
        }
    }

    fn element_bytes(dtype: &str) -> Option<usize> {
        match dtype {
            "float32" | "int32" => Some(4),
            "float64" | "int64" => Some(8),
            _ => None,
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            Blob::F32(v) => v.iter().all(|x| x.is_finite()),
            Blob::F64(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

pub struct ContainerWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl ContainerWriter {
    pub fn create(dir: impl AsRef<Path>, kind: &str, meta: serde_json::Value) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, manifest: Manifest { kind: kind.to_string(), meta, entries: Vec::new() } })
    }

    pub fn add(&mut self, name: &str, shape: &[usize], blob: &Blob) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != blob.len() {
            return Err(Error::ShapeMismatch { modality: name.to_string(), declared: shape.to_vec(), actual: blob.len() });
        }
        let file = format!("{}.bin", name.replace('/', "__"));
        let path = self.dir.join(&file);
        fs::write(&path, blob.to_bytes()).map_err(|e| Error::io(&path, e))?;
        self.manifest.entries.push(Entry { name: name.to_string(), dtype: blob.dtype().to_string(), shape: shape.to_vec(), file });
        Ok(())
    }

    /// Writes the manifest last, through a temporary file, so a partially
    /// written container never carries a manifest.
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST);
        let tmp = self.dir.join(format!("{MANIFEST}.tmp"));
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(self.dir)
    }
}

#[derive(Debug)]
pub struct Container {
    dir: PathBuf,
    manifest: Manifest,
}

impl Container {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.clone(), source: e })?;
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.manifest.entries.iter().find(|e| e.name == name)
    }

    /// Reads one array, checking presence, dtype, declared shape and finiteness.
    pub fn read(&self, name: &str) -> Result<(Vec<usize>, Blob)> {
        let bad = |message: String| Error::Modality { modality: name.to_string(), message };
        let entry = self.entry(name).ok_or_else(|| bad("missing from manifest".into()))?;
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let width = Blob::element_bytes(&entry.dtype).ok_or_else(|| bad(format!("unsupported dtype {}", entry.dtype)))?;
        let declared: usize = entry.shape.iter().product();
        if bytes.len() != declared * width {
            return Err(Error::ShapeMismatch {
                modality: name.to_string(),
                declared: entry.shape.clone(),
                actual: bytes.len() / width,
            });
        }
        let blob = Blob::from_bytes(&entry.dtype, &bytes).ok_or_else(|| bad("corrupt blob".into()))?;
        if !blob.all_finite() {
            return Err(Error::NonFinite { what: name.to_string() });
        }
        Ok((entry.shape.clone(), blob))
    }
}
