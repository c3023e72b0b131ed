//! Checkpoint directories: `manifest` (JSON) plus `weights.bin`, a
//! little-endian f32 blob addressed by the manifest's byte ranges.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::store::ParamStore;

pub const CHECKPOINT_MANIFEST: &str = "manifest";
pub const CHECKPOINT_WEIGHTS: &str = "weights.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
    #[error("weights blob is {actual} bytes, manifest expects {expected}")]
    Length { expected: usize, actual: usize },
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Free-form model description (architecture config, training step).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Copy every tensor of the store from the checkpoint. Extra tensors in
    /// the checkpoint are an error, as are missing ones.
    pub fn load_into(&self, store: &ParamStore) -> Result<(), CheckpointError> {
        for name in store.names() {
            if !self.tensors.contains_key(name) {
                return Err(CheckpointError::Missing(name.to_string()));
            }
        }
        for (name, t) in &self.tensors {
            if store.get(name).is_none() {
                return Err(CheckpointError::Tensor {
                    name: name.clone(),
                    msg: "not a parameter of this model".into(),
                });
            }
            store.set(name, t).map_err(|e| CheckpointError::Tensor {
                name: name.clone(),
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(store: &ParamStore, meta: &serde_json::Value, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, var) in store.iter() {
        let vals = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let offset = blob.len();
        for v in &vals {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.to_string(),
            TensorEntry {
                dtype: "f32".into(),
                shape: var.dims().to_vec(),
                byte_offset: offset,
                byte_length: vals.len() * 4,
            },
        );
    }
    let manifest = CheckpointManifest {
        tensors,
        meta: meta.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), text)?;
    fs::write(dir.join(CHECKPOINT_WEIGHTS), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let blob = fs::read(dir.join(CHECKPOINT_WEIGHTS))?;
    let expected: usize = manifest.tensors.values().map(|e| e.byte_length).sum();
    if blob.len() != expected {
        return Err(CheckpointError::Length {
            expected,
            actual: blob.len(),
        });
    }
    let mut tensors = BTreeMap::new();
    for (name, e) in &manifest.tensors {
        let bad = |msg: String| CheckpointError::Tensor {
            name: name.clone(),
            msg,
        };
        if e.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.byte_length != n * 4 {
            return Err(bad(format!("shape {:?} needs {} bytes, entry has {}", e.shape, n * 4, e.byte_length)));
        }
        let end = e.byte_offset.checked_add(e.byte_length).filter(|&end| end <= blob.len());
        let end = end.ok_or_else(|| bad("byte range outside weights blob".into()))?;
        let vals: Vec<f32> = blob[e.byte_offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(vals, e.shape.as_slice(), &Device::Cpu)?);
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        tensors,
    })
}
