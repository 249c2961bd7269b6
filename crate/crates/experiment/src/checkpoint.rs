//! Parameter blob plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vird_core::model::Model;
use vird_core::Tensor;

use crate::config::TrainConfig;
use crate::error::{io_err, ExperimentError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub blob: String,
    pub num_scalars: usize,
    pub params: Vec<ParamEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes `dir/params.bin` (little-endian f64 in parameter order) and
/// `dir/checkpoint.json`, replacing any earlier checkpoint.
pub fn save_checkpoint(model: &Model, cfg: &TrainConfig, epoch: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(model.store.num_scalars() * 8);
    let mut params = Vec::with_capacity(model.store.len());
    for (name, t) in model.store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        epoch,
        seed: cfg.seed,
        config: cfg.clone(),
        blob: BLOB_FILE.into(),
        num_scalars: model.store.num_scalars(),
        params,
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Corrupt(path.clone(), e.to_string()))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(ExperimentError::Corrupt(
            path,
            format!("checkpoint format version {version:?}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    serde_json::from_value(value).map_err(|e| ExperimentError::Corrupt(path, e.to_string()))
}

/// Rebuilds the model recorded in `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(&manifest.config.model_config(), manifest.seed)?;
    let path = dir.join(&manifest.blob);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != manifest.num_scalars * 8 || manifest.num_scalars != model.store.num_scalars() {
        return Err(ExperimentError::Corrupt(
            path,
            format!(
                "{} bytes for {} scalars; the configured model has {}",
                bytes.len(),
                manifest.num_scalars,
                model.store.num_scalars()
            ),
        ));
    }
    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != manifest.params.len() {
        return Err(ExperimentError::Corrupt(
            dir.join(MANIFEST_FILE),
            format!("{} parameters listed, model has {}", manifest.params.len(), ids.len()),
        ));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for (id, entry) in ids.into_iter().zip(&manifest.params) {
        let current = model.store.get(id);
        if model.store.name(id) != entry.name || current.shape() != entry.shape.as_slice() {
            return Err(ExperimentError::Corrupt(
                dir.join(MANIFEST_FILE),
                format!(
                    "parameter {} {:?} does not match the model's {} {:?}",
                    entry.name,
                    entry.shape,
                    model.store.name(id),
                    current.shape()
                ),
            ));
        }
        let n = current.numel();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        *model.store.get_mut(id) = Tensor::new(&entry.shape, data)?;
    }
    Ok((model, manifest))
}
