//! Tensor container: a directory holding `meta.json` and one raw file per
//! tensor of little-endian `f32` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub name: String,
    pub file: String,
    pub rank: usize,
    pub dims: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    attributes: Map<String, Value>,
    tensors: Vec<TensorIndexEntry>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub attributes: Map<String, Value>,
    pub index: Vec<TensorIndexEntry>,
    pub tensors: Vec<ArrayD<f32>>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.index
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Tensor {
                name: name.to_string(),
                reason: "missing from container".into(),
            })
    }
}

pub fn encode_f32_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

/// Writes a container atomically: everything goes to a sibling temp
/// directory which is then renamed over `dir`.
pub fn write_container(dir: &Path, attributes: &Map<String, Value>, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let base = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "container".into());
    let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut index = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = file_name(name);
        if index.iter().any(|e: &TensorIndexEntry| e.file == file) {
            return Err(Error::Tensor {
                name: name.clone(),
                reason: "duplicate tensor name".into(),
            });
        }
        let bytes = encode_f32_le(t.as_standard_layout().iter().copied());
        let path = tmp.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        index.push(TensorIndexEntry {
            name: name.clone(),
            file,
            rank: t.ndim(),
            dims: t.shape().to_vec(),
            dtype: "f32".into(),
        });
    }
    let meta = Meta {
        format_version: FORMAT_VERSION,
        attributes: attributes.clone(),
        tensors: index,
    };
    let meta_path = tmp.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta).expect("meta serializes"))
        .map_err(|e| Error::io(&meta_path, e))?;

    if dir.exists() {
        let old = parent.join(format!(".{base}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn read_container(dir: &Path) -> Result<Container> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: Value = serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    let version = raw
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(&meta_path, "missing format_version"))? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Migration {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta: Meta = serde_json::from_value(raw).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for entry in &meta.tensors {
        let bad = |reason: String| Error::Tensor {
            name: entry.name.clone(),
            reason,
        };
        if entry.dtype != "f32" {
            return Err(bad(format!("unsupported dtype `{}`", entry.dtype)));
        }
        if entry.rank != entry.dims.len() {
            return Err(bad(format!("rank {} disagrees with dims {:?}", entry.rank, entry.dims)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let numel: usize = entry.dims.iter().product();
        if bytes.len() != numel * 4 {
            return Err(bad(format!(
                "expected {} bytes for dims {:?}, found {} (truncated or corrupt)",
                numel * 4,
                entry.dims,
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(ArrayD::from_shape_vec(IxDyn(&entry.dims), values).expect("length checked"));
    }
    Ok(Container {
        attributes: meta.attributes,
        index: meta.tensors,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn little_endian_layout_is_bit_exact() {
        assert_eq!(encode_f32_le([1.0f32]), vec![0x00, 0x00, 0x80, 0x3f]);
        assert_eq!(encode_f32_le([-2.5f32]), vec![0x00, 0x00, 0x20, 0xc0]);
    }

    #[test]
    fn round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ckpt");
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0f32, -0.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        let mut attrs = Map::new();
        attrs.insert("k".into(), Value::from(3));
        write_container(&target, &attrs, &[("w".into(), t.clone())]).unwrap();
        let back = read_container(&target).unwrap();
        assert_eq!(back.tensor("w").unwrap(), &t);
        assert_eq!(back.attributes["k"], 3);
        assert_eq!(back.index[0].dims, vec![2, 3]);
        // second write replaces the first in place
        write_container(&target, &Map::new(), &[("v".into(), t)]).unwrap();
        let back = read_container(&target).unwrap();
        assert!(back.tensor("w").is_err());
        assert!(back.tensor("v").is_ok());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn truncated_tensor_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("c");
        let t = ArrayD::from_elem(IxDyn(&[4]), 1.0f32);
        write_container(&target, &Map::new(), &[("encoder.conv0.weight".into(), t)]).unwrap();
        let f = target.join("encoder.conv0.weight.bin");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..10]).unwrap();
        match read_container(&target) {
            Err(Error::Tensor { name, .. }) => assert_eq!(name, "encoder.conv0.weight"),
            other => panic!("expected tensor error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_migration_error() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("c");
        write_container(&target, &Map::new(), &[]).unwrap();
        let meta = target.join(META_FILE);
        let text = fs::read_to_string(&meta).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&meta, text).unwrap();
        assert!(matches!(read_container(&target), Err(Error::Migration { found: 7, .. })));
    }
}
