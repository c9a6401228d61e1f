//! Checkpoints: `model.json` describes the topology and the parameter list,
//! `params.bin` holds every parameter as little-endian f32 in list order.
//!
//! Loading checks, in order: the manifest parses and has a known schema, the
//! payload size matches the declared shapes (`Truncated`), and the payload
//! CRC-32 matches the manifest (`Corrupt`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DataError};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    /// `"single"` or `"sequence"`.
    pub topology: String,
    pub model_config: serde_json::Value,
    pub parameters: Vec<ParamSpec>,
    /// Free-form training provenance (epochs, fold, seed, ...).
    #[serde(default)]
    pub training: serde_json::Value,
    pub payload_crc32: u32,
}

/// Writes `store` under `dir`. Values are stored at single precision; call
/// [`ParamStore::round_to_f32`] first if the in-memory model must equal the
/// reloaded one bit for bit.
pub fn save_checkpoint(
    dir: &Path,
    topology: &str,
    model_config: serde_json::Value,
    training: serde_json::Value,
    store: &ParamStore,
) -> Result<CheckpointManifest, DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut payload = Vec::with_capacity(store.scalar_count() * 4);
    let mut parameters = Vec::with_capacity(store.len());
    for id in store.ids() {
        let v = store.value(id);
        parameters.push(ParamSpec {
            name: store.name(id).to_string(),
            shape: v.shape().to_vec(),
        });
        payload.extend(v.data().iter().flat_map(|&x| (x as f32).to_le_bytes()));
    }
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA,
        topology: topology.to_string(),
        model_config,
        parameters,
        training,
        payload_crc32: crc32fast::hash(&payload),
    };
    let bin = dir.join("params.bin");
    std::fs::write(&bin, &payload).map_err(io_err(&bin))?;
    let json = dir.join("model.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&json, text).map_err(io_err(&json))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ParamStore), DataError> {
    let json = dir.join("model.json");
    let text = std::fs::read_to_string(&json).map_err(io_err(&json))?;
    let bad = |message: String| DataError::Manifest {
        path: json.clone(),
        message,
    };
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(bad(format!("unsupported schema_version {}", manifest.schema_version)));
    }
    let bin = dir.join("params.bin");
    let payload = std::fs::read(&bin).map_err(io_err(&bin))?;
    let scalars: usize = manifest.parameters.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != scalars * 4 {
        return Err(DataError::Truncated {
            path: bin,
            expected: scalars * 4,
            actual: payload.len(),
        });
    }
    let actual = crc32fast::hash(&payload);
    if actual != manifest.payload_crc32 {
        return Err(DataError::Corrupt {
            path: bin,
            expected: manifest.payload_crc32,
            actual,
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut store = ParamStore::new();
    for spec in &manifest.parameters {
        let n = spec.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(spec.shape.clone(), data).map_err(|e| bad(format!("{}: {e}", spec.name)))?;
        store.add(spec.name.clone(), t).map_err(|e| bad(e.to_string()))?;
    }
    Ok((manifest, store))
}
