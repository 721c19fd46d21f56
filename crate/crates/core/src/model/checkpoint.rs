//! Checkpoints: `manifest.json` plus one raw little-endian f32 file per
//! tensor, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "analogy-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    seed: u64,
    step: u64,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, _, t) in params.tensors() {
        let file = format!("{name}.f32");
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for &v in t.iter() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config.clone(),
        seed,
        step,
        tensors,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("checkpoint", e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ModelParams<T>, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(mpath.display().to_string(), e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::validation(
            &mpath,
            format!("unknown format {:?}", manifest.format),
        ));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::validation(&mpath, e.to_string()))?;
    let mut params = ModelParams::<T>::zeros(&manifest.config);
    let expected = params.tensors().len();
    if manifest.tensors.len() != expected {
        return Err(Error::validation(
            &mpath,
            format!(
                "{} tensors listed, model has {expected}",
                manifest.tensors.len()
            ),
        ));
    }
    for ((name, _, mut dst), entry) in params.tensors_mut().into_iter().zip(&manifest.tensors) {
        let path = dir.join(&entry.file);
        if entry.name != name || entry.shape != dst.shape() {
            return Err(Error::validation(
                &path,
                format!("expected tensor {name} with shape {:?}", dst.shape()),
            ));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != dst.len() * 4 {
            return Err(Error::validation(
                &path,
                format!("{} bytes, expected {}", bytes.len(), dst.len() * 4),
            ));
        }
        for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::validation(&path, "non-finite value"));
            }
            *d = T::of(v as f64);
        }
    }
    Ok((params, manifest))
}
