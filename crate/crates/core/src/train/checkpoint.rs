//! Checkpoint directory: `manifest.json` plus one raw little-endian `f32`
//! blob per parameter array under `params/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::file_digest;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::tape::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    /// Training configuration the parameters came from, if any.
    pub train: Option<serde_json::Value>,
    pub step: usize,
    /// SHA-256 of the loss-history file at save time.
    pub history_digest: Option<String>,
    pub params: Vec<ParamEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Write every parameter of `params`. Values must already be `f32`-exact;
/// anything else would not round-trip.
pub fn save_checkpoint(
    dir: &Path,
    model: &ModelConfig,
    params: &ParamStore,
    step: usize,
    train: Option<serde_json::Value>,
    history_digest: Option<String>,
) -> Result<CheckpointManifest> {
    let blob_dir = dir.join("params");
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, m) in params.iter() {
        if let Some(x) = m.iter().find(|&&x| x as f32 as f64 != x) {
            return Err(Error::InvalidArgument(format!("{name} holds {x}, which is not an f32 value")));
        }
        let bytes: Vec<u8> = m.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        let file = format!("params/{name}.f32");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: [m.nrows(), m.ncols()],
            file,
            sha256: file_digest(&bytes),
        });
    }
    let manifest = CheckpointManifest {
        model: model.clone(),
        train,
        step,
        history_digest,
        params: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Load and verify a checkpoint. When `expect` is given, the stored model
/// configuration must equal it. Every array must have the shape the model
/// configuration implies and match its digest.
pub fn load_checkpoint(dir: &Path, expect: Option<&ModelConfig>) -> Result<(CheckpointManifest, ParamStore)> {
    let manifest = read_manifest(dir)?;
    if let Some(cfg) = expect {
        if cfg != &manifest.model {
            return Err(Error::Shape("checkpoint model configuration differs from the requested one".into()));
        }
    }
    manifest.model.validate()?;
    let reference = ParamStore::init(&manifest.model, 0);
    let listed: Vec<&str> = manifest.params.iter().map(|e| e.name.as_str()).collect();
    let wanted = reference.names();
    if listed != wanted.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Shape("checkpoint parameter names do not match the model configuration".into()));
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let want = reference.get(&e.name).expect("listed").dim();
        if (e.shape[0], e.shape[1]) != want {
            return Err(Error::Shape(format!("{} stored as {:?}, model needs {:?}", e.name, e.shape, want)));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if file_digest(&bytes) != e.sha256 {
            return Err(Error::Digest(path));
        }
        if bytes.len() != 4 * want.0 * want.1 {
            return Err(Error::format(&path, format!("{} bytes for shape {:?}", bytes.len(), want)));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(e.name.clone(), Mat::from_shape_vec(want, values).expect("sized"));
    }
    Ok((manifest, store))
}
