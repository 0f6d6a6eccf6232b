//! Parameter checkpoints.
//!
//! A checkpoint is a directory holding two files:
//!
//! * `params.bin`: every parameter matrix, row-major, as little-endian `f64`,
//!   concatenated in registration order.
//! * `manifest.json`: format version, config hash, free-form metadata and a
//!   table of `name -> shape, offset, sha256` for each tensor.
//!
//! Raw bit patterns are stored, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::params::ParamStore;
use super::tape::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checksum mismatch for tensor {0}")]
    Checksum(String),
    #[error("checkpoint truncated: tensor {0} extends past end of params.bin")]
    Truncated(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("missing tensor {0} in checkpoint")]
    MissingTensor(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    Shape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn tensor_bytes(m: &Matrix) -> Vec<u8> {
    m.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn save(
    dir: &Path,
    stage: &str,
    config_hash: &str,
    meta: serde_json::Value,
    store: &ParamStore,
) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, value) in store.iter() {
        let bytes = tensor_bytes(value);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [value.nrows(), value.ncols()],
            offset: blob.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        meta,
        tensors,
    };
    let params_path = dir.join(PARAMS);
    fs::write(&params_path, &blob).map_err(io_err(&params_path))?;
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    Ok(manifest)
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file() && dir.join(PARAMS).is_file()
}

/// Loads every tensor into a fresh store, verifying checksums.
pub fn load(dir: &Path) -> Result<(Manifest, ParamStore), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PARAMS);
    let blob = fs::read(&path).map_err(io_err(&path))?;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let len = entry.shape[0] * entry.shape[1] * 8;
        let end = entry.offset + len;
        if end > blob.len() {
            return Err(CheckpointError::Truncated(entry.name.clone()));
        }
        let bytes = &blob[entry.offset..end];
        if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
            return Err(CheckpointError::Checksum(entry.name.clone()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_shape_vec((entry.shape[0], entry.shape[1]), data)
            .expect("shape matches byte count");
        store.add(entry.name.clone(), m);
    }
    Ok((manifest, store))
}

/// Overwrites every parameter of `target` with the same-named tensor of
/// `source`. All names must be present with matching shapes.
pub fn assign_all(target: &mut ParamStore, source: &ParamStore) -> Result<(), CheckpointError> {
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let src_id = source
            .id(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let src = source.get(src_id);
        let dst = target.get_mut(id);
        if src.dim() != dst.dim() {
            return Err(CheckpointError::Shape {
                name,
                found: src.dim(),
                expected: dst.dim(),
            });
        }
        dst.assign(src);
    }
    Ok(())
}
