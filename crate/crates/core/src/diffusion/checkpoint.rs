//! Checkpoint directory: `params/<name>.{bin,json}` tensor files plus a
//! `manifest.json` describing architecture, vocabulary, schedule and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DenoiserModel, ModelConfig};
use super::schedule::NoiseSchedule;
use crate::autodiff::io::{load_tensor, save_tensor};
use crate::autodiff::Element;
use crate::error::{Error, Result};
use crate::vocab::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture_hash: String,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub schedule: NoiseSchedule,
    pub training: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub params: Vec<String>,
    pub code_version: String,
}

pub fn save_checkpoint<E: Element>(
    dir: &Path,
    model: &DenoiserModel<E>,
    schedule: &NoiseSchedule,
    training: serde_json::Value,
    seeds: BTreeMap<String, u64>,
) -> Result<CheckpointManifest> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir)?;
    let mut names = Vec::new();
    for (name, t) in model.weights.named() {
        save_tensor(&params_dir.join(&name), t)?;
        names.push(name);
    }
    let manifest = CheckpointManifest {
        architecture_hash: model.architecture_hash(),
        model: model.config,
        vocab: Token::vocabulary()
            .iter()
            .map(|(w, _)| w.to_string())
            .collect(),
        schedule: schedule.clone(),
        training,
        seeds,
        params: names,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_checkpoint<E: Element>(dir: &Path) -> Result<(DenoiserModel<E>, CheckpointManifest)> {
    let mut manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    manifest.schedule = manifest.schedule.rebuild()?;
    let mut model = DenoiserModel::<E>::init(manifest.model, 0)?;
    let names: Vec<String> = model.weights.named().into_iter().map(|(n, _)| n).collect();
    if names != manifest.params {
        return Err(Error::contract(
            "checkpoint parameter list does not match the architecture",
        ));
    }
    for (name, slot) in names.iter().zip(model.weights.iter_mut()) {
        let t = load_tensor::<E>(&dir.join("params").join(name))?;
        if t.shape() != slot.shape() {
            return Err(Error::Dimension {
                op: "load_checkpoint",
                lhs: t.shape().to_vec(),
                rhs: slot.shape().to_vec(),
            });
        }
        *slot = t;
    }
    if model.architecture_hash() != manifest.architecture_hash {
        return Err(Error::contract("architecture hash mismatch"));
    }
    Ok((model, manifest))
}
