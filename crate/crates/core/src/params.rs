//! Named trainable tensors and their on-disk checkpoint format.
//!
//! A checkpoint is a pair of files sharing a stem: `<stem>.json` holds the
//! manifest (name, shape, dtype, byte offset of every tensor) and
//! `<stem>.bin` holds the values as little-endian f64, concatenated in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "ata-checkpoint";
pub const CHECKPOINT_DTYPE: &str = "f64-le";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; parameters always require gradients.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every tensor of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: ModelParams) {
        self.tensors.extend(other.tensors);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Records every parameter on the tape. With `trainable = false` the
    /// parameters enter as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Accumulates the tape gradients of bound parameters into `grad`.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (name, tensor) in self.tensors.iter_mut() {
            let var = bound.get(name)?;
            if let Some(g) = tape.grad(var) {
                tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Every value in name order, for exact comparisons.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Identical names, shapes and bit patterns.
    pub fn bit_identical(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (manifest_path, blob_path) = checkpoint_paths(stem.as_ref());
        let mut blob = Vec::with_capacity(self.numel() * 8);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                len: t.numel() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            dtype: CHECKPOINT_DTYPE.into(),
            blob: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors: entries,
        };
        if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (manifest_path, _) = checkpoint_paths(stem.as_ref());
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bad = |msg: String| Error::Data {
            path: manifest_path.clone(),
            message: msg,
        };
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != CHECKPOINT_DTYPE {
            return Err(bad(format!(
                "unsupported checkpoint {}/{}",
                manifest.format, manifest.dtype
            )));
        }
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut params = ModelParams::new();
        let mut expected_offset = 0u64;
        for entry in manifest.tensors {
            if entry.offset != expected_offset {
                return Err(bad(format!("tensor `{}` at offset {} (expected {expected_offset})", entry.name, entry.offset)));
            }
            let start = entry.offset as usize;
            let end = start + entry.len as usize * 8;
            if end > blob.len() {
                return Err(bad(format!("tensor `{}` runs past the end of the blob", entry.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| bad(e.to_string()))?;
            params.insert(entry.name, t);
            expected_offset = end as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(bad(format!("blob has {} trailing bytes", blob.len() - expected_offset as usize)));
        }
        Ok(params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    blob: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Number of f64 values.
    len: u64,
}

/// Manifest and blob paths for a checkpoint stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = if stem.extension().is_some_and(|e| e == "json" || e == "bin") {
        stem.with_extension("")
    } else {
        stem.to_path_buf()
    };
    let name = base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (base.with_file_name(format!("{name}.json")), base.with_file_name(format!("{name}.bin")))
}
