//! Flat tensor archive: `<stem>.bin` holds little-endian float32 data back
//! to back, `<stem>.json` maps each name to its shape and offset and carries
//! free-form metadata.

use std::fs;
use std::path::{Path, PathBuf};

use dpt_core::tensor::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Element offset into the data file.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn write_archive<'a>(
    stem: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Matrix<f32>)>,
    meta: serde_json::Value,
) -> Result<()> {
    let (bin, json) = paths(stem);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, m) in tensors {
        entries.push(TensorEntry { name: name.to_string(), shape: vec![m.rows, m.cols], dtype: "float32".into(), offset });
        for v in &m.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += m.data.len();
    }
    let data_file = bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest = Manifest { data_file, tensors: entries, meta };
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
    }
    fs::write(&bin, bytes).map_err(|e| IoError::at(&bin, e))?;
    crate::io::write_json(&json, &manifest)
}

pub fn read_archive(stem: &Path) -> Result<(Vec<(String, Matrix<f32>)>, serde_json::Value)> {
    let (_, json) = paths(stem);
    let manifest: Manifest = crate::io::read_json(&json)?;
    let bin = json.with_file_name(&manifest.data_file);
    let bytes = fs::read(&bin).map_err(|e| IoError::at(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(IoError::format(&bin, "length is not a multiple of 4").into());
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in manifest.tensors {
        if t.dtype != "float32" {
            return Err(IoError::format(&json, format!("tensor {} has dtype {}", t.name, t.dtype)).into());
        }
        let (rows, cols) = match t.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(IoError::format(&json, format!("tensor {} has rank {}", t.name, t.shape.len())).into()),
        };
        let end = t.offset + rows * cols;
        let data = floats
            .get(t.offset..end)
            .ok_or_else(|| IoError::format(&bin, format!("tensor {} overruns the data file", t.name)))?;
        out.push((t.name, Matrix::from_vec(rows, cols, data.to_vec())));
    }
    Ok((out, manifest.meta))
}
