//! Model checkpoints: a `VSEPARAM` tensor file holding both networks, the
//! best-validation copy (`best.*`) and the optimizer moments, plus a JSON
//! sidecar at `<path>.json` with everything else needed to rebuild or resume.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{TrainConfig, TrainState};
use super::VseModel;
use crate::error::{Result, VseError};
use crate::measurement::Measurement;
use crate::nn::checkpoint::{decode_tensor_table, encode_tensor_table};
use crate::nn::{AdamState, Architecture, GruStackParams, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub samples: usize,
    pub sigma_w2: f64,
    pub measurement: Measurement,
    pub epoch: usize,
    pub learning_rate: f64,
    pub adam_step: u64,
    pub best_val: Option<f64>,
    pub stale_epochs: usize,
    pub since_best: usize,
    /// Epoch of the `best.*` tensors, when present.
    pub best_epoch: Option<usize>,
    pub train_config: TrainConfig,
    /// SHA-256 over the architecture, sample count and training config.
    pub config_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn config_hash(arch: &Architecture, samples: usize, cfg: &TrainConfig) -> String {
    let blob = serde_json::to_vec(&(arch, samples, cfg)).expect("plain data serializes");
    Sha256::digest(&blob)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let model = &state.model;
    let named = model.named_tensors();
    let mut table: Vec<(String, Tensor)> = named
        .iter()
        .map(|(n, t)| (n.clone(), (*t).clone()))
        .collect();
    for (k, (name, t)) in named.iter().enumerate() {
        table.push((
            format!("adam.m.{name}"),
            Tensor {
                shape: t.shape.clone(),
                data: state.adam.m[k].clone(),
            },
        ));
        table.push((
            format!("adam.v.{name}"),
            Tensor {
                shape: t.shape.clone(),
                data: state.adam.v[k].clone(),
            },
        ));
    }
    if let Some((_, best)) = &state.best {
        for (n, t) in best.named_tensors() {
            table.push((format!("best.{n}"), t.clone()));
        }
    }
    let arch = model.architecture();
    let meta = CheckpointMeta {
        architecture: arch,
        samples: model.samples,
        sigma_w2: model.sigma_w2,
        measurement: model.measurement.clone(),
        epoch: state.epoch,
        learning_rate: state.lr,
        adam_step: state.adam.step,
        best_val: state.best_val,
        stale_epochs: state.stale_epochs,
        since_best: state.since_best,
        best_epoch: state.best.as_ref().map(|(e, _)| *e),
        train_config: config.clone(),
        config_hash: config_hash(&arch, model.samples, config),
    };
    let bytes = encode_tensor_table(table.iter().map(|(n, t)| (n.as_str(), t)));
    std::fs::write(path, bytes).map_err(|e| VseError::io(path, e))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(&side, json).map_err(|e| VseError::io(&side, e))
}

fn fill(
    params: &mut GruStackParams,
    prefix: &str,
    table: &mut std::collections::HashMap<String, Tensor>,
) -> Result<()> {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let key = format!("{prefix}{name}");
        let t = table
            .remove(&key)
            .ok_or_else(|| VseError::Malformed(format!("checkpoint lacks tensor `{key}`")))?;
        if t.shape != slot.shape {
            return Err(VseError::Malformed(format!(
                "tensor `{key}` has shape {:?}, architecture expects {:?}",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    Ok(())
}

/// Restores the full training state, optimizer moments included.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| VseError::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let bytes = std::fs::read(path).map_err(|e| VseError::io(path, e))?;
    let mut table: std::collections::HashMap<String, Tensor> =
        decode_tensor_table(&bytes)?.into_iter().collect();
    let mut model = VseModel {
        prior: GruStackParams::zeros(&meta.architecture),
        post: GruStackParams::zeros(&meta.architecture),
        measurement: meta.measurement.clone(),
        sigma_w2: meta.sigma_w2,
        samples: meta.samples,
    };
    fill(&mut model.prior, "prior.", &mut table)?;
    fill(&mut model.post, "post.", &mut table)?;
    let mut adam = AdamState::new(model.named_tensors().into_iter().map(|(_, t)| t));
    adam.step = meta.adam_step;
    for (k, (name, t)) in model.named_tensors().into_iter().enumerate() {
        for (which, buf) in [("m", &mut adam.m[k]), ("v", &mut adam.v[k])] {
            let key = format!("adam.{which}.{name}");
            match table.remove(&key) {
                Some(s) if s.data.len() == t.len() => *buf = s.data,
                Some(_) => {
                    return Err(VseError::Malformed(format!(
                        "tensor `{key}` has the wrong size"
                    )))
                }
                None => {
                    return Err(VseError::Malformed(format!(
                        "checkpoint lacks tensor `{key}`"
                    )))
                }
            }
        }
    }
    let best = match meta.best_epoch {
        None => None,
        Some(e) => {
            let mut b = model.clone();
            fill(&mut b.prior, "best.prior.", &mut table)?;
            fill(&mut b.post, "best.post.", &mut table)?;
            Some((e, Box::new(b)))
        }
    };
    let state = TrainState {
        model,
        adam,
        epoch: meta.epoch,
        lr: meta.learning_rate,
        best_val: meta.best_val,
        stale_epochs: meta.stale_epochs,
        since_best: meta.since_best,
        best,
    };
    Ok((state, meta))
}

/// The model to deploy: the best-validation parameters when recorded.
pub fn load_model(path: &Path) -> Result<VseModel> {
    load_checkpoint(path).map(|(s, _)| s.best_model().clone())
}
