//! Binary container of named `f64` tensors with a JSON manifest.
//!
//! `<stem>.bin` holds the tensors back to back as little-endian `f64`;
//! `<stem>.json` lists each tensor's name, shape and element offset, plus a
//! free-form `meta` object. Key order in the manifest is sorted, so writing
//! the same content twice yields byte-identical files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the binary file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: Value,
}

/// In-memory contents of a container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub meta: Value,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self { tensors: Vec::new(), meta }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name).ok_or_else(|| Error::Format(format!("container has no tensor `{name}`")))
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut bin = BufWriter::new(fs::File::create(bin_path(stem))?);
        let mut offset = 0;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
            for v in data {
                bin.write_all(&v.to_le_bytes())?;
            }
            offset += data.len();
        }
        bin.flush()?;
        let manifest = Manifest { dtype: DTYPE.into(), tensors: entries, meta: self.meta.clone() };
        fs::write(json_path(stem), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(json_path(stem))?)?;
        if manifest.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let bytes = fs::read(bin_path(stem))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("binary payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the payload", e.name)))?;
            tensors.push((e.name, e.shape, data.to_vec()));
        }
        Ok(Self { tensors, meta: manifest.meta })
    }
}

pub fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn json_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}
