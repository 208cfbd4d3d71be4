//! Named-tensor checkpoint archive shared by generator, transformer and
//! training-state files.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `DRGCKPT\0`                          |
//! | 8      | 4    | `u32` format version (currently 1)         |
//! | 12     | 8    | `u64` manifest length `m` in bytes         |
//! | 20     | m    | UTF-8 JSON manifest                        |
//! | 20 + m | ...  | tensor blob: contiguous `f32` values       |
//!
//! The manifest is `{format_version, kind, config, extra, tensors}` where each
//! tensor entry is `{name, shape, dtype: "f32", offset}` and `offset` is the
//! byte offset of the tensor's first element from the start of the blob.
//! Tensors are stored row-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DRGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    #[serde(default)]
    pub extra: Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory archive: manifest metadata plus decoded tensors.
#[derive(Debug, Clone)]
pub struct Archive {
    pub kind: String,
    pub config: Value,
    pub extra: Value,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    source: PathBuf,
}

impl Archive {
    pub fn new(kind: impl Into<String>, config: Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            extra: Value::Null,
            tensors: Vec::new(),
            source: PathBuf::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape.to_vec(), data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _, _)| n == name)
    }

    fn load_err(&self, reason: String) -> Error {
        Error::Load {
            path: self.source.clone(),
            reason,
        }
    }

    /// Tensor data, checked against the expected shape.
    pub fn get(&self, name: &str, expected: &[usize]) -> Result<&[f32]> {
        let (_, shape, data) = self
            .tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| self.load_err(format!("missing tensor `{name}`")))?;
        if shape != expected {
            return Err(self.load_err(format!(
                "shape mismatch for `{name}`: expected {expected:?}, found {shape:?}"
            )));
        }
        Ok(data)
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(self.load_err(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * data.len() as u64;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let err = |reason: String| Error::Load {
            path: source.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!("unknown format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let blob_start = HEADER_LEN
            .checked_add(mlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| err("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
            .map_err(|e| err(format!("malformed manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(err(format!(
                "manifest version {} disagrees with header version {version}",
                manifest.format_version
            )));
        }
        let blob = &bytes[blob_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            if entry.dtype != "f32" {
                return Err(err(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * count;
            if end > blob.len() {
                return Err(err(format!("tensor `{}` runs past the end of the blob", entry.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name, entry.shape, data));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            extra: manifest.extra,
            tensors,
            source: source.to_path_buf(),
        })
    }
}
