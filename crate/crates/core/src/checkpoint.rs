//! JSON checkpoints: `{"version": "gaf-ckpt-1", "params": {path: {shape, values}}}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "gaf-ckpt-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found:?}, expected {CHECKPOINT_VERSION:?}")]
    Version { found: String },
    #[error("checkpoint is missing parameter {0}")]
    Missing(String),
    #[error("checkpoint parameter {0} is not used by the model")]
    Unexpected(String),
    #[error("parameter {name}: {detail}")]
    BadParam { name: String, detail: String },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub params: BTreeMap<String, StoredParam>,
}

impl Checkpoint {
    pub fn from_sets<'a>(sets: impl IntoIterator<Item = &'a ParamSet>) -> Self {
        let params = sets
            .into_iter()
            .flat_map(|s| s.iter())
            .map(|p| {
                (
                    p.name.clone(),
                    StoredParam {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            params,
        }
    }

    pub fn shape_of(&self, name: &str) -> Result<&[usize], CheckpointError> {
        self.params
            .get(name)
            .map(|p| p.shape.as_slice())
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Copies stored values into `set`, checking names and shapes.
    pub fn restore(&self, set: &mut ParamSet) -> Result<(), CheckpointError> {
        for p in set.iter_mut() {
            let stored = self
                .params
                .get(&p.name)
                .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            if stored.shape != p.value.shape() {
                return Err(CheckpointError::BadParam {
                    name: p.name.clone(),
                    detail: format!("shape {:?}, model expects {:?}", stored.shape, p.value.shape()),
                });
            }
            p.value = Tensor::new(stored.shape.clone(), stored.values.clone()).map_err(|e| CheckpointError::BadParam {
                name: p.name.clone(),
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Fails on any stored parameter that none of `sets` declares.
    pub fn check_no_extras<'a>(&self, sets: impl IntoIterator<Item = &'a ParamSet>) -> Result<(), CheckpointError> {
        let sets: Vec<&ParamSet> = sets.into_iter().collect();
        for name in self.params.keys() {
            if !sets.iter().any(|s| s.find(name).is_some()) {
                return Err(CheckpointError::Unexpected(name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        // check the version before the full schema so old files get a clear error
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("version").and_then(|v| v.as_str()).unwrap_or_default();
        if found != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: found.to_string(),
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Writes to a sibling temporary file and renames it over `path`, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
