//! Batch composition, the optimization loop, plateau learning-rate decay,
//! validation and checkpointing.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, Clip};
use crate::corpus::{ClipRecord, Manifest, Split};
use crate::encoder::lora::is_lora_param;
use crate::encoder::{save_checkpoint, AdaptationMode, EncoderModel, Gradients, LoraConfig};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::rnc::{rnc_batch, RncConfig};
use crate::rng;
use crate::surrogate::SurrogateLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Defaults to 1e-4, or 5e-5 in `transformer_finetune` mode.
    pub initial_lr: Option<f64>,
    pub decay_factor: f64,
    pub patience_epochs: usize,
    pub clean_fraction: f64,
    /// Required; there is no default epoch budget.
    pub max_epochs: Option<usize>,
    pub adaptation_mode: AdaptationMode,
    pub embedding_dim: usize,
    pub lora: LoraConfig,
    pub loss: RncConfig,
    /// Minimum validation-loss decrease that counts as an improvement.
    pub improvement_threshold: f64,
    /// Records elapsed seconds in the metrics log; off keeps logs bit-reproducible.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            initial_lr: None,
            decay_factor: 0.99,
            patience_epochs: 10,
            clean_fraction: 0.125,
            max_epochs: None,
            adaptation_mode: AdaptationMode::Lora,
            embedding_dim: 256,
            lora: LoraConfig::default(),
            loss: RncConfig::default(),
            improvement_threshold: 1e-6,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.initial_lr.unwrap_or(match self.adaptation_mode {
            AdaptationMode::TransformerFinetune => 5e-5,
            _ => 1e-4,
        })
    }

    pub fn num_clean(&self) -> usize {
        (self.clean_fraction * self.batch_size as f64).round() as usize
    }

    pub fn check(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(Error::Config("clean_fraction must lie in [0, 1]".into()));
        }
        if !(self.lr() > 0.0) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if self.max_epochs.is_none() {
            return Err(Error::Config("train.max_epochs is required".into()));
        }
        if self.adaptation_mode == AdaptationMode::Frozen {
            return Err(Error::Config("adaptation_mode `frozen` has nothing to train".into()));
        }
        self.loss.check()?;
        if self.adaptation_mode == AdaptationMode::Lora {
            self.lora.check()?;
        }
        Ok(())
    }
}

/// Plateau schedule: once more than `patience` epochs pass without
/// improvement, the rate decays by `factor` after every further epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: f64,
    pub since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            since_improvement: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best - self.threshold {
            self.best = val;
            self.since_improvement = 0;
            return true;
        }
        self.since_improvement += 1;
        if self.since_improvement > self.patience {
            self.lr *= self.factor;
        }
        false
    }
}

/// Train and validation records with their labels.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub records: Vec<ClipRecord>,
    pub labels: Vec<SurrogateLabel>,
    /// Positions in the manifest record list.
    pub manifest_index: Vec<usize>,
}

impl LabeledSplit {
    pub fn from_manifest(m: &Manifest, split: Split) -> Result<Self> {
        let mut out = LabeledSplit {
            records: Vec::new(),
            labels: Vec::new(),
            manifest_index: Vec::new(),
        };
        for (i, r) in m.records.iter().enumerate().filter(|(_, r)| r.split == split) {
            out.labels.push(SurrogateLabel::from_record(r)?);
            out.records.push(r.clone());
            out.manifest_index.push(i);
        }
        Ok(out)
    }

    fn strata(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.records.len()).partition(|&i| self.labels[i].is_clean())
    }
}

/// Draws `round(clean_fraction · N)` clean and the remaining coded items,
/// uniformly without replacement within each stratum.
pub fn sample_batch<R: rand::Rng>(clean: &[usize], coded: &[usize], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<usize>> {
    let n_clean = cfg.num_clean();
    let n_coded = cfg.batch_size - n_clean;
    if n_clean > clean.len() {
        return Err(Error::Sampling(format!(
            "clean stratum holds {} records, batch needs {n_clean}",
            clean.len()
        )));
    }
    if n_coded > coded.len() {
        return Err(Error::Sampling(format!(
            "coded stratum holds {} records, batch needs {n_coded}",
            coded.len()
        )));
    }
    let mut out: Vec<usize> = clean.choose_multiple(rng, n_clean).copied().collect();
    out.extend(coded.choose_multiple(rng, n_coded).copied());
    Ok(out)
}

/// One epoch: a permutation of the coded records cut into batches, each
/// topped up with freshly drawn clean records.
pub fn epoch_batches(split: &LabeledSplit, cfg: &TrainConfig, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let (clean, mut coded) = split.strata();
    let n_clean = cfg.num_clean();
    let n_coded = cfg.batch_size - n_clean;
    if coded.is_empty() && n_coded > 0 {
        return Err(Error::Sampling("coded training stratum is empty".into()));
    }
    if n_clean > clean.len() {
        return Err(Error::Sampling(format!(
            "clean training stratum holds {} records, batch needs {n_clean}",
            clean.len()
        )));
    }
    let mut r = rng::substream_path(seed, &["epoch", &epoch.to_string()]);
    coded.shuffle(&mut r);
    let chunks: Vec<Vec<usize>> = if n_coded == 0 {
        // all-clean batches: one pass over the clean records
        let mut c = clean.clone();
        c.shuffle(&mut r);
        return Ok(c.chunks(cfg.batch_size).filter(|b| b.len() >= 2).map(<[usize]>::to_vec).collect());
    } else {
        coded.chunks(n_coded).map(<[usize]>::to_vec).collect()
    };
    let mut out = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let mut batch: Vec<usize> = clean.choose_multiple(&mut r, n_clean).copied().collect();
        batch.extend(chunk);
        if batch.len() >= 2 {
            out.push(batch);
        }
    }
    Ok(out)
}

/// Fixed partition of the validation split into batches.
pub fn validation_batches(split: &LabeledSplit, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let (_, coded) = split.strata();
    if coded.is_empty() {
        return Err(Error::Sampling("coded validation stratum is empty".into()));
    }
    let mut idx: Vec<usize> = (0..split.records.len()).collect();
    idx.shuffle(&mut rng::substream(seed, "val-partition"));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    Ok(batches)
}

fn load_clip(m: &Manifest, r: &ClipRecord, rate: u32) -> Result<Clip> {
    let c = audio::read_clip(&m.resolve(&r.clip_path))?;
    if c.sample_rate != rate {
        return Err(Error::Precondition(format!(
            "{}: {} Hz, model expects {rate} Hz",
            r.clip_path, c.sample_rate
        )));
    }
    Ok(c.with_source(r.clip_id.clone(), r.offset_seconds))
}

/// Inference-mode embeddings of the given split items, in order.
pub fn embed_items(model: &EncoderModel, m: &Manifest, split: &LabeledSplit, items: &[usize]) -> Result<Vec<Vec<f64>>> {
    items
        .par_iter()
        .map(|&i| {
            let clip = load_clip(m, &split.records[i], model.sample_rate())?;
            Ok(model.embed(&clip)?.vector)
        })
        .collect()
}

/// Mean batch loss over the fixed validation partition.
pub fn validate(model: &EncoderModel, m: &Manifest, val: &LabeledSplit, batches: &[Vec<usize>], loss: &RncConfig) -> Result<f64> {
    let all: Vec<usize> = (0..val.records.len()).collect();
    let emb = embed_items(model, m, val, &all)?;
    let mut total = 0.0;
    for b in batches {
        let labels: Vec<SurrogateLabel> = b.iter().map(|&i| val.labels[i]).collect();
        let e: Vec<Vec<f64>> = b.iter().map(|&i| emb[i].clone()).collect();
        total += rnc_batch(&labels, &e, loss)?.loss;
    }
    Ok(total / batches.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
        lr: f64,
        wallclock: Option<f64>,
    },
    Epoch {
        epoch: usize,
        val_loss: f64,
        best_val_loss: f64,
        improved: bool,
        /// Rate used for the next epoch.
        lr: f64,
        wallclock: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub final_lr: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(f),
            path,
        })
    }

    fn push(&mut self, r: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn decay_for(mode: AdaptationMode, lora_wd: f64) -> impl Fn(&str) -> Option<f64> {
    move |name: &str| {
        let trainable = match mode {
            AdaptationMode::Frozen => false,
            AdaptationMode::HeadOnly => name.starts_with("head."),
            AdaptationMode::Lora => name.starts_with("head.") || is_lora_param(name),
            AdaptationMode::TransformerFinetune => {
                name.starts_with("head.") || (name.starts_with("encoder.layers.") && !is_lora_param(name))
            }
        };
        trainable.then(|| if is_lora_param(name) { lora_wd } else { 0.0 })
    }
}

/// Gradient of the batch loss for `batch` (split indices) and the loss itself.
fn batch_gradient(
    model: &EncoderModel,
    m: &Manifest,
    split: &LabeledSplit,
    batch: &[usize],
    loss_cfg: &RncConfig,
    dropout_seeds: &[u64],
) -> Result<(f64, Gradients)> {
    let prefixes: Vec<_> = batch
        .par_iter()
        .map(|&i| model.prefix(&load_clip(m, &split.records[i], model.sample_rate())?))
        .collect::<Result<_>>()?;
    let emb: Vec<Vec<f64>> = prefixes
        .par_iter()
        .zip(dropout_seeds.par_iter())
        .zip(batch.par_iter())
        .map(|((h0, &s), &i)| model.embed_from_prefix(h0, Some(s), &split.records[i].clip_id))
        .collect::<Result<_>>()?;
    let labels: Vec<SurrogateLabel> = batch.iter().map(|&i| split.labels[i]).collect();
    let out = rnc_batch(&labels, &emb, loss_cfg)?;
    if !out.loss.is_finite() || out.grad.iter().flatten().any(|g| !g.is_finite()) {
        let idx: Vec<usize> = batch.iter().map(|&i| split.manifest_index[i]).collect();
        return Err(Error::Numeric(format!(
            "non-finite loss {} on batch with manifest indices {idx:?}",
            out.loss
        )));
    }
    let per_item: Vec<Gradients> = prefixes
        .par_iter()
        .zip(dropout_seeds.par_iter())
        .zip(out.grad.par_iter())
        .map(|((h0, &s), g)| {
            let mut grads = Gradients::default();
            model.backward_from_prefix(h0, Some(s), g, &mut grads);
            grads
        })
        .collect();
    let mut grads = Gradients::default();
    for g in &per_item {
        grads.merge(g);
    }
    Ok((out.loss, grads))
}

/// Full training run writing `best`/`last` checkpoints and `metrics.jsonl` into `out_dir`.
pub fn train(
    manifest: &Manifest,
    model: &mut EncoderModel,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: &Path,
    config_echo: &serde_json::Value,
) -> Result<TrainSummary> {
    cfg.check()?;
    if model.mode != cfg.adaptation_mode {
        return Err(Error::Config(format!(
            "model built for {} but training requested {}",
            model.mode.as_str(),
            cfg.adaptation_mode.as_str()
        )));
    }
    let max_epochs = cfg.max_epochs.unwrap_or(0);
    let train = LabeledSplit::from_manifest(manifest, Split::Train)?;
    let val = LabeledSplit::from_manifest(manifest, Split::Val)?;
    if train.records.is_empty() || val.records.is_empty() {
        return Err(Error::Precondition("manifest needs non-empty train and val splits".into()));
    }
    let val_batches = validation_batches(&val, cfg.batch_size, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.safetensors");
    let last_path = out_dir.join("last.safetensors");
    let mut log = MetricsLog::create(out_dir.join("metrics.jsonl"))?;
    let started = Instant::now();
    let clock = || cfg.record_wallclock.then(|| started.elapsed().as_secs_f64());

    let decay = decay_for(cfg.adaptation_mode, cfg.lora.weight_decay);
    let mut opt = AdamW::default();
    let mut sched = PlateauSchedule::new(cfg.lr(), cfg.decay_factor, cfg.patience_epochs, cfg.improvement_threshold);

    let initial_val = validate(model, manifest, &val, &val_batches, &cfg.loss)?;
    log.push(&MetricRecord::Epoch {
        epoch: 0,
        val_loss: initial_val,
        best_val_loss: initial_val,
        improved: false,
        lr: sched.lr,
        wallclock: clock(),
    })?;
    log::info!("epoch 0: val loss {initial_val:.6}");
    save_checkpoint(model, &best_path, config_echo)?;

    let mut step: u64 = 0;
    let mut best_epoch = 0;
    let mut best_val = initial_val;
    let mut final_val = initial_val;
    for epoch in 1..=max_epochs {
        let lr = sched.lr;
        for (b, batch) in epoch_batches(&train, cfg, seed, epoch)?.iter().enumerate() {
            step += 1;
            let seeds: Vec<u64> = (0..batch.len())
                .map(|p| rng::derive_seed(seed, &["dropout", &epoch.to_string(), &b.to_string(), &p.to_string()]))
                .collect();
            let (loss, grads) = batch_gradient(model, manifest, &train, batch, &cfg.loss, &seeds)?;
            opt.step(model, &grads, lr, &decay);
            log.push(&MetricRecord::Step {
                step,
                epoch,
                loss,
                lr,
                wallclock: clock(),
            })?;
        }
        let v = validate(model, manifest, &val, &val_batches, &cfg.loss)?;
        final_val = v;
        let improved = sched.observe(v);
        if improved {
            best_epoch = epoch;
            best_val = v;
            save_checkpoint(model, &best_path, config_echo)?;
        }
        log.push(&MetricRecord::Epoch {
            epoch,
            val_loss: v,
            best_val_loss: best_val,
            improved,
            lr: sched.lr,
            wallclock: clock(),
        })?;
        log::info!("epoch {epoch}: val loss {v:.6}, lr {:.3e}", sched.lr);
    }
    save_checkpoint(model, &last_path, config_echo)?;
    Ok(TrainSummary {
        epochs: max_epochs,
        steps: step,
        initial_val_loss: initial_val,
        final_val_loss: final_val,
        best_val_loss: best_val,
        best_epoch,
        final_lr: sched.lr,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        metrics: log.path.clone(),
    })
}
