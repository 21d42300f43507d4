//! Parameter checkpoints: one FDT1 file per named tensor plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use octnet_tensor::{fdt1, Module, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Param name to file name, relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn file_name(param: &str) -> String {
    let safe: String = param
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.fdt1")
}

/// Writes every param (trainable and buffer) of `module` into `dir`.
pub fn save<T: Scalar>(dir: &Path, module: &impl Module<T>, config_hash: &str, meta: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for p in module.params() {
        let file = file_name(&p.name);
        if tensors.values().any(|f| f == &file) {
            return Err(CoreError::Checkpoint(format!("two params map to file {file}")));
        }
        fdt1::save(dir.join(&file), &p.value)?;
        tensors.insert(p.name.clone(), file);
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        tensors,
        meta,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint into `module`. Every param of the module must be present
/// with a matching shape; `expected_hash`, when given, must match the manifest.
pub fn load<T: Scalar>(dir: &Path, module: &mut impl Module<T>, expected_hash: Option<&str>) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    if let Some(h) = expected_hash {
        if h != manifest.config_hash {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint config hash {} does not match {h}",
                manifest.config_hash
            )));
        }
    }
    // Read everything first so a bad checkpoint leaves the module untouched.
    let mut loaded = BTreeMap::new();
    for p in module.params() {
        let file = manifest
            .tensors
            .get(&p.name)
            .ok_or_else(|| CoreError::Checkpoint(format!("checkpoint lacks {}", p.name)))?;
        let t = fdt1::load::<T>(dir.join(file))?;
        if t.shape() != p.value.shape() {
            return Err(CoreError::Checkpoint(format!(
                "{} has shape {} in checkpoint, {} in model",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        loaded.insert(p.name.clone(), t);
    }
    module.visit_mut(&mut |p| {
        if let Some(t) = loaded.remove(&p.name) {
            p.value = t;
        }
    });
    Ok(manifest)
}
