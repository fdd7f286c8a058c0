//! Checkpoints: a binary blob of concatenated little-endian f32 arrays
//! plus a JSON manifest mapping parameter name to (shape, byte offset,
//! byte length). A checkpoint base path `ckpt` produces `ckpt.bin` and
//! `ckpt.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint entry `{name}`: blob range {offset}..{end} out of bounds ({len} bytes)")]
    BadRange {
        name: String,
        offset: usize,
        end: usize,
        len: usize,
    },
    #[error("checkpoint entry `{name}`: byte length {bytes} does not match shape {shape:?}")]
    LengthMismatch {
        name: String,
        bytes: usize,
        shape: Vec<usize>,
    },
    #[error("parameter `{name}` missing from checkpoint")]
    MissingParam { name: String },
    #[error("parameter `{name}`: checkpoint shape {ckpt:?} does not match model shape {model:?}")]
    ShapeMismatch {
        name: String,
        ckpt: Vec<usize>,
        model: Vec<usize>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    params: Vec<ManifestEntry>,
}

fn bin_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("bin")
}

fn json_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("json")
}

/// Writes `<base>.bin` and `<base>.json` for every parameter in store
/// order.
pub fn save_checkpoint(store: &ParamStore, base: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let base = base.as_ref();
    let mut blob = Vec::with_capacity(store.total_values() * 4);
    let mut entries = Vec::with_capacity(store.len());
    for (name, tensor) in store.iter() {
        let byte_offset = blob.len();
        for v in &tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape.clone(),
            byte_offset,
            byte_len: tensor.data.len() * 4,
        });
    }
    let manifest = Manifest {
        schema_version: 1,
        params: entries,
    };
    let bin = bin_path(base);
    std::fs::write(&bin, &blob).map_err(|source| CheckpointError::Io {
        path: bin.display().to_string(),
        source,
    })?;
    let json = json_path(base);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|source| CheckpointError::Json {
            path: json.display().to_string(),
            source,
        })?;
    std::fs::write(&json, text).map_err(|source| CheckpointError::Io {
        path: json.display().to_string(),
        source,
    })
}

/// Loads a checkpoint into an existing store. Every store parameter must
/// be present with a matching shape; extra checkpoint entries are
/// ignored.
pub fn load_checkpoint(store: &mut ParamStore, base: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let base = base.as_ref();
    let json = json_path(base);
    let text = std::fs::read_to_string(&json).map_err(|source| CheckpointError::Io {
        path: json.display().to_string(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: json.display().to_string(),
            source,
        })?;
    let bin = bin_path(base);
    let blob = std::fs::read(&bin).map_err(|source| CheckpointError::Io {
        path: bin.display().to_string(),
        source,
    })?;

    for slot in 0..store.len() {
        let name = store.name(slot).to_string();
        let entry = manifest
            .params
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingParam { name: name.clone() })?;
        let model_shape = store.get(slot).shape.clone();
        if entry.shape != model_shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                ckpt: entry.shape.clone(),
                model: model_shape,
            });
        }
        let end = entry.byte_offset + entry.byte_len;
        if end > blob.len() {
            return Err(CheckpointError::BadRange {
                name,
                offset: entry.byte_offset,
                end,
                len: blob.len(),
            });
        }
        let count: usize = entry.shape.iter().product();
        if entry.byte_len != count * 4 {
            return Err(CheckpointError::LengthMismatch {
                name,
                bytes: entry.byte_len,
                shape: entry.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[entry.byte_offset..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        *store.get_mut(slot) = Tensor {
            shape: entry.shape.clone(),
            data,
        };
    }
    Ok(())
}
