//! Checkpoint directories: `manifest.json` plus one `.tns` file per named
//! parameter.
//!
//! An `oracle` checkpoint carries no parameters; evaluating it returns the
//! targets themselves, which pins the metric pipeline at exactly zero error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrsa::{LrsaConfig, LrsaModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Lrsa,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub config: Option<LrsaConfig>,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Model { model: LrsaModel, step: u64 },
    Oracle,
}

const MANIFEST: &str = "manifest.json";

fn write_manifest(dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &LrsaModel, step: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let file = format!("{name}.tns");
        t.save(dir.join(&file))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    write_manifest(
        dir,
        &CheckpointManifest {
            kind: CheckpointKind::Lrsa,
            config: Some(model.config.clone()),
            step,
            tensors,
        },
    )
}

pub fn save_oracle_checkpoint(dir: impl AsRef<Path>) -> Result<()> {
    write_manifest(
        dir.as_ref(),
        &CheckpointManifest {
            kind: CheckpointKind::Oracle,
            config: None,
            step: 0,
            tensors: vec![],
        },
    )
}

/// Reads a checkpoint and checks every tensor against the shapes its config
/// implies; any disagreement names the offending tensor.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.kind == CheckpointKind::Oracle {
        return Ok(Checkpoint::Oracle);
    }
    let config = manifest.config.clone().ok_or_else(|| Error::Load {
        name: MANIFEST.into(),
        reason: "model checkpoint without a config".into(),
    })?;
    let mut model = LrsaModel::new(config, 0)?;
    load_params_into(dir, &manifest, &mut model)?;
    Ok(Checkpoint::Model {
        model,
        step: manifest.step,
    })
}

/// Overwrites `model`'s parameters with the checkpoint's tensors.
pub(crate) fn load_params_into(dir: &Path, manifest: &CheckpointManifest, model: &mut LrsaModel) -> Result<()> {
    for entry in &manifest.tensors {
        if model.params.find(&entry.name).is_none() {
            return Err(Error::Load {
                name: entry.name.clone(),
                reason: "not a parameter of the configured model".into(),
            });
        }
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Load {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
        if entry.file.contains('/') || entry.file.contains("..") {
            return Err(Error::Load {
                name,
                reason: format!("unsafe file name `{}`", entry.file),
            });
        }
        let t = Tensor::load(dir.join(&entry.file)).map_err(|e| Error::Load {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        let expect = model.params.get(id).shape().to_vec();
        if t.shape() != expect.as_slice() {
            return Err(Error::Load {
                name,
                reason: format!("shape {:?} but the config implies {:?}", t.shape(), expect),
            });
        }
        *model.params.get_mut(id) = t;
    }
    Ok(())
}
