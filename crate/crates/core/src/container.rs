// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor container shared by model weights and SAEs: a JSON manifest naming
//! each tensor's shape, dtype and byte range, plus one little-endian blob file
//! next to it.
//!
//! Tensors are written as `f64` so that a save/load round trip is bit-exact.
//! Readers also accept `f32` entries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    site: Option<String>,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

/// Fully validated contents of a container file.
#[derive(Debug)]
pub struct Container {
    pub path: PathBuf,
    pub config: Value,
    pub site: Option<String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("{}: missing tensor '{name}'", self.path.display())))
    }

    /// Fails if the file held tensors the caller never asked for.
    pub fn finish(self) -> Result<()> {
        match self.tensors.keys().next() {
            None => Ok(()),
            Some(extra) => Err(Error::Format(format!(
                "{}: unexpected tensor '{extra}'",
                self.path.display()
            ))),
        }
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save(path: &Path, kind: &str, config: Value, site: Option<String>, tensors: &[(String, &Tensor)]) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = bytes.len() as u64;
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            length: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        config,
        site,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors: entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path, kind: &str) -> Result<Container> {
    let fmt = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw: Value = serde_json::from_slice(&text).map_err(|e| fmt(format!("manifest is not JSON: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| fmt("manifest lacks format_version".into()))?;
    if version > u32::MAX as u64 || !SUPPORTED_VERSIONS.contains(&(version as u32)) {
        return Err(Error::Version {
            found: version.min(u32::MAX as u64) as u32,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| fmt(format!("bad manifest: {e}")))?;
    if manifest.kind != kind {
        return Err(fmt(format!("expected a {kind} container, found '{}'", manifest.kind)));
    }
    let blob_file = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;

    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let width = match e.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(fmt(format!("tensor '{}': unsupported dtype '{other}'", e.name))),
        };
        let numel: usize = e.shape.iter().product();
        if e.length != (numel * width) as u64 {
            return Err(fmt(format!(
                "tensor '{}': length {} bytes does not match shape {:?} of {}",
                e.name, e.length, e.shape, e.dtype
            )));
        }
        let end = e.offset.checked_add(e.length).filter(|end| *end <= blob.len() as u64);
        let Some(end) = end else {
            return Err(fmt(format!(
                "tensor '{}': byte range {}+{} exceeds blob of {} bytes (truncated?)",
                e.name,
                e.offset,
                e.length,
                blob.len()
            )));
        };
        let bytes = &blob[e.offset as usize..end as usize];
        let data: Vec<f64> = if width == 8 {
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        } else {
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect()
        };
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| fmt(format!("tensor '{}': {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(fmt(format!("duplicate tensor '{}'", e.name)));
        }
    }
    Ok(Container {
        path: path.to_path_buf(),
        config: manifest.config,
        site: manifest.site,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> PathBuf {
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.1, 1e-300, 3.5]).unwrap();
        let b = Tensor::vector(vec![0.3; 3]);
        let path = dir.join("c.json");
        save(&path, "model", Value::Null, Some("s".into()), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        path
    }

    fn edit_manifest(path: &Path, f: impl FnOnce(&mut Value)) {
        let mut v: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        f(&mut v);
        fs::write(path, serde_json::to_vec(&v).unwrap()).unwrap();
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path());
        let mut c = load(&path, "model").unwrap();
        assert_eq!(c.site.as_deref(), Some("s"));
        assert_eq!(c.take("a").unwrap().data()[2], 1e-300);
        c.take("b").unwrap();
        c.finish().unwrap();
    }

    #[test]
    fn wrong_length_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path());
        edit_manifest(&path, |v| v["tensors"][0]["length"] = 24.into());
        assert!(matches!(load(&path, "model"), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path());
        let blob = blob_path(&path);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = load(&path, "model").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn unknown_version_names_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path());
        edit_manifest(&path, |v| v["format_version"] = 7.into());
        match load(&path, "model") {
            Err(Error::Version { found, supported }) => {
                assert_eq!(found, 7);
                assert_eq!(supported, vec![1]);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn f32_entries_are_widened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        let blob: Vec<u8> = [1.5f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("f.bin"), blob).unwrap();
        let m = serde_json::json!({
            "format_version": 1, "kind": "model", "config": null, "blob": "f.bin",
            "tensors": [{"name": "x", "shape": [2], "dtype": "f32", "offset": 0, "length": 8}]
        });
        fs::write(&path, m.to_string()).unwrap();
        let mut c = load(&path, "model").unwrap();
        assert_eq!(c.take("x").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path());
        assert!(load(&path, "sae").is_err());
    }
}
