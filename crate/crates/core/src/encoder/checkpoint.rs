//! Trained-state checkpoints: adapter, head and (when fine-tuned) layer
//! tensors plus a JSON header identifying the backbone they belong to.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::lora::{is_lora_param, LoraConfig};
use super::model::{AdaptationMode, EncoderModel};
use super::ops::Parameters;
use super::tensors::{read_tensors, write_tensors, StoreAs, TensorMap};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "aqlearn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "aqlearn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub backbone_id: String,
    pub backbone_revision: String,
    pub backbone: BackboneConfig,
    pub mode: AdaptationMode,
    pub embedding_dim: usize,
    pub lora: Option<LoraConfig>,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn stored(model: &EncoderModel, name: &str) -> bool {
    name.starts_with("head.")
        || is_lora_param(name)
        || (model.mode == AdaptationMode::TransformerFinetune && name.starts_with("encoder.layers."))
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path, config: &serde_json::Value) -> Result<()> {
    let cfg = &model.backbone.cfg;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        backbone_id: cfg.id.clone(),
        backbone_revision: cfg.revision.clone(),
        backbone: cfg.clone(),
        mode: model.mode,
        embedding_dim: model.embedding_dim(),
        lora: model.lora.clone(),
        config: config.clone(),
    };
    let mut tensors = TensorMap::new();
    model.visit("", &mut |n, s, v| {
        if stored(model, n) {
            tensors.insert(n.to_string(), (s.to_vec(), v.to_vec()));
        }
    });
    let mut md = BTreeMap::new();
    md.insert(META_KEY.to_string(), serde_json::to_string(&meta)?);
    write_tensors(path, &tensors, &md, StoreAs::F64)
}

fn parse_meta(path: &Path, md: &BTreeMap<String, String>) -> Result<CheckpointMeta> {
    let raw = md
        .get(META_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("{}: not a checkpoint (no header)", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    Ok(meta)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let (_, md) = read_tensors(path)?;
    parse_meta(path, &md)
}

/// Restores a checkpoint on top of `base`, which must be the backbone the
/// checkpoint was trained from.
pub fn load_checkpoint(path: &Path, base: Backbone) -> Result<EncoderModel> {
    let (tensors, md) = read_tensors(path)?;
    let meta = parse_meta(path, &md)?;
    let cfg = &base.cfg;
    if cfg.id != meta.backbone_id || cfg.revision != meta.backbone_revision {
        return Err(Error::Checkpoint(format!(
            "{}: trained on backbone {}@{}, but {}@{} was supplied",
            path.display(),
            meta.backbone_id,
            meta.backbone_revision,
            cfg.id,
            cfg.revision
        )));
    }
    if cfg.param_shapes() != meta.backbone.param_shapes() {
        return Err(Error::Checkpoint(format!(
            "{}: backbone shape differs from the checkpoint's",
            path.display()
        )));
    }
    let mut model = EncoderModel::new(base, meta.embedding_dim, AdaptationMode::Frozen, None, 0)?;
    if let Some(l) = &meta.lora {
        model.apply_lora(l, 0)?;
    }
    model.mode = meta.mode;

    let mut missing = Vec::new();
    let mut assigned = 0usize;
    let mut shape_err = None;
    let mode = model.mode;
    model.visit_mut("", &mut |n, dst| {
        let wanted = n.starts_with("head.")
            || is_lora_param(n)
            || (mode == AdaptationMode::TransformerFinetune && n.starts_with("encoder.layers."));
        if !wanted {
            return;
        }
        match tensors.get(n) {
            Some((_, v)) if v.len() == dst.len() => {
                dst.copy_from_slice(v);
                assigned += 1;
            }
            Some((s, _)) => shape_err = Some(format!("{n}: stored shape {s:?} does not fit")),
            None => missing.push(n.to_string()),
        }
    });
    if let Some(e) = shape_err {
        return Err(Error::Checkpoint(format!("{}: {e}", path.display())));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("{}: missing tensors {missing:?}", path.display())));
    }
    if assigned != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} stored tensors have no place in the model",
            path.display(),
            tensors.len() - assigned
        )));
    }
    Ok(model)
}
