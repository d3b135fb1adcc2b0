//! Tensor container: a JSON manifest (name, shape, dtype, byte offset per
//! tensor) plus one little-endian `f32` blob.
//!
//! Two physical layouts share the manifest schema:
//! - a manifest file next to a separate blob file (checkpoints, CE exports);
//! - a single self-contained file: magic, `u64` manifest length, manifest,
//!   blob (cache entries).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Float;

pub const FORMAT: &str = "cecomp-tensors";
pub const VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CECOMP01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest. Absent for single-file containers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn container_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl TensorBundle {
    pub fn push<T: Float>(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[T]) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data: data.iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies tensor `name` into `dst`, checking the element count.
    pub fn load_into<T: Float>(&self, name: &str, dst: &mut [T]) -> Result<()> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::input(format!("tensor {name} missing from container")))?;
        if t.data.len() != dst.len() {
            return Err(Error::Shape(format!(
                "tensor {name} holds {} values, expected {}",
                t.data.len(),
                dst.len()
            )));
        }
        for (d, &s) in dst.iter_mut().zip(&t.data) {
            *d = T::lit(s as f64);
        }
        Ok(())
    }

    fn encode(&self, blob_name: Option<String>) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32le".into(),
                offset: blob.len() as u64,
            });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            blob: blob_name,
            meta: self.meta.clone(),
            tensors: entries,
        };
        (manifest, blob)
    }

    fn decode(manifest: Manifest, blob: &[u8], path: &Path) -> Result<Self> {
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(container_err(
                path,
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32le" {
                return Err(container_err(path, format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 4;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| container_err(path, format!("tensor {} overruns blob", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    /// Writes `<manifest_path>` and a sibling blob with extension `.bin`.
    pub fn write_pair(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = manifest_path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| container_err(manifest_path, "manifest path has no file name"))?
            .to_string();
        let (manifest, blob) = self.encode(Some(blob_name));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
        Ok(())
    }

    pub fn read_pair(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| container_err(manifest_path, e.to_string()))?;
        let blob_name = manifest
            .blob
            .clone()
            .ok_or_else(|| container_err(manifest_path, "manifest names no blob file"))?;
        let blob_path: PathBuf = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(blob_name);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        Self::decode(manifest, &blob, manifest_path)
    }

    pub fn to_single_bytes(&self) -> Vec<u8> {
        let (manifest, blob) = self.encode(None);
        let text = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(16 + text.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_single_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(container_err(path, "bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let text = bytes
            .get(16..16 + len)
            .ok_or_else(|| container_err(path, "truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(text).map_err(|e| container_err(path, e.to_string()))?;
        Self::decode(manifest, &bytes[16 + len..], path)
    }

    pub fn write_single(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_single_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_single(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_single_bytes(&bytes, path)
    }
}

/// SHA-256 over names, shapes and the `f32` little-endian values of a tensor
/// list, hex encoded.
pub fn digest_tensors<'a, T: Float>(tensors: impl IntoIterator<Item = (String, Vec<usize>, &'a [T])>) -> String {
    let mut h = Sha256::new();
    for (name, shape, data) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((shape.len() as u64).to_le_bytes());
        for s in shape {
            h.update((s as u64).to_le_bytes());
        }
        for v in data {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> TensorBundle {
        let mut b = TensorBundle::default();
        b.meta.insert("kind".into(), "test".into());
        b.push("a", vec![2, 2], &[1.0f32, -2.0, 3.5, 0.0]);
        b.push("b", vec![3], &[0.25f64, 1e-3, -7.0]);
        b
    }

    #[test]
    fn pair_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let b = bundle();
        b.write_pair(&path).unwrap();
        assert!(dir.path().join("ckpt.bin").exists());
        assert_eq!(TensorBundle::read_pair(&path).unwrap(), b);

        let text = fs::read_to_string(&path).unwrap();
        let manifest: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest.tensors[1].offset, 16);
        assert_eq!(manifest.tensors[1].dtype, "f32le");
        let blob = fs::read(dir.path().join("ckpt.bin")).unwrap();
        assert_eq!(&blob[4..8], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn single_layout_round_trips_and_rejects_garbage() {
        let b = bundle();
        let bytes = b.to_single_bytes();
        let p = Path::new("mem");
        assert_eq!(TensorBundle::from_single_bytes(&bytes, p).unwrap(), b);
        assert!(TensorBundle::from_single_bytes(b"nope", p).is_err());
        assert!(TensorBundle::from_single_bytes(&bytes[..bytes.len() - 2], p).is_err());
    }

    #[test]
    fn load_into_checks_size() {
        let b = bundle();
        let mut dst = [0.0f64; 3];
        b.load_into("b", &mut dst).unwrap();
        assert_eq!(dst[2], -7.0);
        assert!(b.load_into("a", &mut dst).is_err());
        assert!(b.load_into("zzz", &mut dst).is_err());
    }

    #[test]
    fn digest_sensitive_to_values_and_names() {
        let x = [1.0f32, 2.0];
        let base = digest_tensors([("w".to_string(), vec![2], &x[..])]);
        assert_eq!(base.len(), 64);
        let y = [1.0f32, 2.5];
        assert_ne!(base, digest_tensors([("w".to_string(), vec![2], &y[..])]));
        assert_ne!(base, digest_tensors([("v".to_string(), vec![2], &x[..])]));
        assert_eq!(base, digest_tensors([("w".to_string(), vec![2], &x[..])]));
    }
}
