//! Loader for published backbones stored as a directory holding a
//! Hugging-Face-style `config.json` and one or more `*.safetensors` files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::backbone::{Backbone, BackboneConfig};
use super::ops::Parameters;
use super::tensors::{read_tensors, write_tensors, StoreAs, TensorMap};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct HfConfig {
    #[serde(default, rename = "_name_or_path")]
    name_or_path: Option<String>,
    conv_dim: Vec<usize>,
    conv_kernel: Vec<usize>,
    conv_stride: Vec<usize>,
    #[serde(default)]
    conv_bias: bool,
    #[serde(default = "default_norm")]
    feat_extract_norm: String,
    #[serde(default)]
    do_stable_layer_norm: bool,
    hidden_size: usize,
    num_attention_heads: usize,
    intermediate_size: usize,
    num_hidden_layers: usize,
    #[serde(default)]
    num_conv_pos_embeddings: usize,
    #[serde(default = "one")]
    num_conv_pos_embedding_groups: usize,
    #[serde(default = "default_eps")]
    layer_norm_eps: f64,
    #[serde(default = "default_act")]
    hidden_act: String,
    #[serde(default = "default_act")]
    feat_extract_activation: String,
    #[serde(default)]
    sample_rate: Option<u32>,
}

fn default_norm() -> String {
    "group".into()
}
fn one() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-5
}
fn default_act() -> String {
    "gelu".into()
}

/// Where and how to load a published backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedSource {
    pub dir: PathBuf,
    /// Overrides the id found in `config.json`.
    pub id: Option<String>,
    pub revision: String,
    /// Used when `config.json` has no `sample_rate`.
    pub default_sample_rate: u32,
}

fn read_config(source: &PretrainedSource) -> Result<BackboneConfig> {
    let path = source.dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let hf: HfConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let unsupported = |what: String| Err(Error::Config(format!("{}: unsupported {what}", path.display())));
    if hf.feat_extract_norm != "group" {
        return unsupported(format!("feat_extract_norm {:?}", hf.feat_extract_norm));
    }
    if hf.do_stable_layer_norm {
        return unsupported("pre-norm (do_stable_layer_norm) layers".into());
    }
    if hf.hidden_act != "gelu" || hf.feat_extract_activation != "gelu" {
        return unsupported(format!("activation {}/{}", hf.hidden_act, hf.feat_extract_activation));
    }
    let id = source
        .id
        .clone()
        .or(hf.name_or_path)
        .unwrap_or_else(|| source.dir.display().to_string());
    let cfg = BackboneConfig {
        id,
        revision: source.revision.clone(),
        sample_rate: hf.sample_rate.unwrap_or(source.default_sample_rate),
        normalize_input: true,
        conv_dim: hf.conv_dim,
        conv_kernel: hf.conv_kernel,
        conv_stride: hf.conv_stride,
        conv_bias: hf.conv_bias,
        group_norm_first: true,
        log_energy_floor: None,
        hidden_size: hf.hidden_size,
        num_heads: hf.num_attention_heads,
        intermediate_size: hf.intermediate_size,
        num_layers: hf.num_hidden_layers,
        pos_conv_kernel: hf.num_conv_pos_embeddings,
        pos_conv_groups: hf.num_conv_pos_embedding_groups,
        layer_norm_eps: hf.layer_norm_eps,
        masked_spec_embed: false,
        max_seconds: 30.0,
    };
    cfg.check()?;
    Ok(cfg)
}

/// Alternative stored names for a registry name.
fn aliases(name: &str) -> Vec<String> {
    let mut out = vec![name.to_string()];
    if let Some(stem) = name.strip_suffix(".weight_g") {
        out.push(format!("{stem}.parametrizations.weight.original0"));
    }
    if let Some(stem) = name.strip_suffix(".weight_v") {
        out.push(format!("{stem}.parametrizations.weight.original1"));
    }
    out
}

/// Finds `name` exactly, or as the unique suffix after a model prefix such as `hubert.`.
fn lookup<'a>(tensors: &'a TensorMap, name: &str) -> Result<Option<&'a (Vec<usize>, Vec<f64>)>> {
    for alias in aliases(name) {
        if let Some(t) = tensors.get(&alias) {
            return Ok(Some(t));
        }
        let suffix = format!(".{alias}");
        let hits: Vec<_> = tensors.iter().filter(|(k, _)| k.ends_with(&suffix)).collect();
        match hits.len() {
            0 => {}
            1 => return Ok(Some(hits[0].1)),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "ambiguous tensor {name}: {:?}",
                    hits.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>()
                )))
            }
        }
    }
    Ok(None)
}

fn weight_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "safetensors") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: no *.safetensors weights (convert pickled checkpoints first)",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn load_pretrained(source: &PretrainedSource) -> Result<Backbone> {
    let mut cfg = read_config(source)?;
    let mut tensors = TensorMap::new();
    for f in weight_files(&source.dir)? {
        tensors.extend(read_tensors(&f)?.0);
    }
    cfg.masked_spec_embed = lookup(&tensors, "masked_spec_embed")?.is_some();
    let mut backbone = Backbone::random(cfg, 0)?;
    let mut problems = Vec::new();
    backbone.visit_mut("", &mut |name, dst| match lookup(&tensors, name) {
        Ok(Some((shape, v))) if v.len() == dst.len() => dst.copy_from_slice(v),
        Ok(Some((shape, _))) => problems.push(format!("{name}: shape {shape:?} does not match")),
        Ok(None) => problems.push(format!("{name}: missing")),
        Err(e) => problems.push(e.to_string()),
    });
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: {} weight problems, first: {}",
            source.dir.display(),
            problems.len(),
            problems[0]
        )));
    }
    Ok(backbone)
}

/// Writes a backbone in the layout [`load_pretrained`] reads.
pub fn save_pretrained(backbone: &Backbone, dir: &Path, store: StoreAs) -> Result<()> {
    let c = &backbone.cfg;
    let config = serde_json::json!({
        "_name_or_path": c.id,
        "conv_dim": c.conv_dim,
        "conv_kernel": c.conv_kernel,
        "conv_stride": c.conv_stride,
        "conv_bias": c.conv_bias,
        "feat_extract_norm": "group",
        "do_stable_layer_norm": false,
        "hidden_size": c.hidden_size,
        "num_attention_heads": c.num_heads,
        "intermediate_size": c.intermediate_size,
        "num_hidden_layers": c.num_layers,
        "num_conv_pos_embeddings": c.pos_conv_kernel,
        "num_conv_pos_embedding_groups": c.pos_conv_groups,
        "layer_norm_eps": c.layer_norm_eps,
        "hidden_act": "gelu",
        "feat_extract_activation": "gelu",
        "sample_rate": c.sample_rate,
    });
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cp = dir.join("config.json");
    std::fs::write(&cp, serde_json::to_string_pretty(&config)?).map_err(|e| Error::io(&cp, e))?;
    let mut tensors = TensorMap::new();
    backbone.visit("", &mut |n, s, v| {
        if !n.ends_with(".lora_a") && !n.ends_with(".lora_b") {
            tensors.insert(n.to_string(), (s.to_vec(), v.to_vec()));
        }
    });
    write_tensors(&dir.join("model.safetensors"), &tensors, &BTreeMap::new(), store)
}
