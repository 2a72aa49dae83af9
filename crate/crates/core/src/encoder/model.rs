use std::collections::BTreeMap;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, GradTargets};
use super::lora::{is_lora_param, LoraConfig};
use super::ops::{Gradients, Linear, Mat, Parameters};
use crate::audio::Clip;
use crate::error::{Error, Result};
use crate::rng;

/// Which parameters are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Nothing is trainable (inference).
    Frozen,
    HeadOnly,
    /// Adapters plus the projection head.
    Lora,
    /// Every transformer-layer parameter plus the projection head.
    TransformerFinetune,
}

impl AdaptationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationMode::Frozen => "frozen",
            AdaptationMode::HeadOnly => "head_only",
            AdaptationMode::Lora => "lora",
            AdaptationMode::TransformerFinetune => "transformer_finetune",
        }
    }
}

/// Projection-head output for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub norm: f64,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Self {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { vector, norm }
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        euclidean(&self.vector, &other.vector)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-layer features of one clip: `states[l]` is `(frames, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub states: Vec<Mat>,
}

impl BackboneOutput {
    /// Time-mean per layer, concatenated over layers.
    pub fn pooled_flat(&self) -> Vec<f64> {
        pool(&self.states)
    }
}

fn pool(states: &[Mat]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(states.len() * states.first().map_or(0, |s| s.ncols()));
    for s in states {
        let n = s.nrows() as f64;
        flat.extend(s.sum_axis(ndarray::Axis(0)).iter().map(|v| v / n));
    }
    flat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
    /// Trainable counts by top-level module path.
    pub by_module: BTreeMap<String, usize>,
}

/// Backbone, optional adapters and projection head `linear(ReLU(flat))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub backbone: Backbone,
    pub head: Linear,
    pub mode: AdaptationMode,
    pub lora: Option<LoraConfig>,
}

impl EncoderModel {
    /// Builds a model with a freshly initialized head; `lora` mode attaches adapters.
    pub fn new(backbone: Backbone, embedding_dim: usize, mode: AdaptationMode, lora: Option<&LoraConfig>, seed: u64) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        let flat = backbone.cfg.flat_dim();
        let mut r = rng::substream(seed, "head-init");
        let bound = 1.0 / (flat as f64).sqrt();
        let head = Linear {
            weight: Mat::from_shape_simple_fn((embedding_dim, flat), || r.random_range(-bound..bound)),
            bias: Some(Array1::from_shape_simple_fn(embedding_dim, || r.random_range(-bound..bound))),
        };
        let mut model = Self {
            backbone,
            head,
            mode,
            lora: None,
        };
        if mode == AdaptationMode::Lora {
            let cfg = lora.ok_or_else(|| Error::Config("lora mode needs a LoRA configuration".into()))?;
            model.apply_lora(cfg, seed)?;
        }
        Ok(model)
    }

    /// Attaches adapters; the forward pass is unchanged because `B` starts at zero.
    pub fn apply_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        self.backbone.apply_lora(cfg, seed)?;
        self.lora = Some(cfg.clone());
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.out_features()
    }

    pub fn sample_rate(&self) -> u32 {
        self.backbone.cfg.sample_rate
    }

    fn check_input(&self, clip: &Clip) -> Result<()> {
        let cfg = &self.backbone.cfg;
        if clip.sample_rate != cfg.sample_rate {
            return Err(Error::Precondition(format!(
                "{}: sample rate {} Hz, backbone expects {} Hz",
                clip.source_id, clip.sample_rate, cfg.sample_rate
            )));
        }
        if clip.duration() > cfg.max_seconds {
            return Err(Error::Precondition(format!(
                "{}: {:.2} s exceeds the backbone limit of {} s",
                clip.source_id,
                clip.duration(),
                cfg.max_seconds
            )));
        }
        if cfg.num_frames(clip.len()) == 0 {
            return Err(Error::Precondition(format!(
                "{}: {} samples is shorter than the backbone receptive field",
                clip.source_id,
                clip.len()
            )));
        }
        if !clip.is_finite() {
            return Err(Error::Numeric(format!("{}: non-finite input samples", clip.source_id)));
        }
        Ok(())
    }

    /// Frozen front-end output for a clip; constant across training, so callers may cache it.
    pub fn prefix(&self, clip: &Clip) -> Result<Mat> {
        self.check_input(clip)?;
        let h0 = self.backbone.embed_frames(&clip.to_f64());
        if h0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{}: non-finite values in hidden state 0", clip.source_id)));
        }
        Ok(h0)
    }

    pub fn features(&self, clip: &Clip) -> Result<BackboneOutput> {
        let h0 = self.prefix(clip)?;
        let states = self.backbone.run_layers(h0, None);
        check_states(&states, &clip.source_id)?;
        Ok(BackboneOutput { states })
    }

    /// Inference-mode embedding (adapter dropout disabled).
    pub fn embed(&self, clip: &Clip) -> Result<Embedding> {
        let out = self.features(clip)?;
        Ok(Embedding::new(self.head_forward(&out.pooled_flat())))
    }

    pub fn head_forward(&self, flat: &[f64]) -> Vec<f64> {
        let w = &self.head.weight;
        let b = self.head.bias.as_ref();
        (0..w.nrows())
            .map(|o| {
                let dot: f64 = w.row(o).iter().zip(flat).map(|(wi, x)| wi * x.max(0.0)).sum();
                dot + b.map_or(0.0, |b| b[o])
            })
            .collect()
    }

    /// Embedding from a cached prefix; `dropout` is the per-item seed of training mode.
    pub fn embed_from_prefix(&self, h0: &Mat, dropout: Option<u64>, label: &str) -> Result<Vec<f64>> {
        let states = self.backbone.run_layers(h0.clone(), dropout);
        check_states(&states, label)?;
        Ok(self.head_forward(&pool(&states)))
    }

    /// Recomputes the forward pass from `h0` and accumulates gradients of
    /// `⟨g_embed, embedding⟩` for the trainable parameters.
    pub fn backward_from_prefix(&self, h0: &Mat, dropout: Option<u64>, g_embed: &[f64], grads: &mut Gradients) {
        if self.mode == AdaptationMode::Frozen {
            return;
        }
        let targets = GradTargets {
            base: self.mode == AdaptationMode::TransformerFinetune,
            lora: self.mode == AdaptationMode::Lora,
        };
        let backbone_grads = targets.base || (targets.lora && self.backbone.has_lora());
        let (states, caches) = if backbone_grads {
            let (s, c) = self.backbone.run_layers_cached(h0.clone(), dropout);
            (s, Some(c))
        } else {
            (self.backbone.run_layers(h0.clone(), dropout), None)
        };
        let flat = pool(&states);
        let relu: Vec<f64> = flat.iter().map(|v| v.max(0.0)).collect();
        let (e, f) = (self.head.out_features(), flat.len());
        let mut gw = vec![0.0; e * f];
        for o in 0..e {
            let g = g_embed[o];
            if g != 0.0 {
                for (dst, &x) in gw[o * f..(o + 1) * f].iter_mut().zip(&relu) {
                    *dst = g * x;
                }
            }
        }
        grads.add("head.weight", &gw);
        grads.add("head.bias", g_embed);

        let Some(caches) = caches else { return };
        let mut g_flat = vec![0.0; f];
        for (o, &g) in g_embed.iter().enumerate() {
            for (dst, &w) in g_flat.iter_mut().zip(self.head.weight.row(o)) {
                *dst += g * w;
            }
        }
        for (gv, &x) in g_flat.iter_mut().zip(&flat) {
            if x <= 0.0 {
                *gv = 0.0;
            }
        }
        let width = self.backbone.cfg.hidden_size;
        let g_states: Vec<Mat> = states
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let t = s.nrows();
                let row = &g_flat[l * width..(l + 1) * width];
                Mat::from_shape_fn((t, width), |(_, c)| row[c] / t as f64)
            })
            .collect();
        self.backbone.backward_layers(&caches, g_states, targets, grads);
    }

    /// Whether `name` receives optimizer updates in the current mode.
    pub fn is_trainable(&self, name: &str) -> bool {
        let head = name.starts_with("head.");
        match self.mode {
            AdaptationMode::Frozen => false,
            AdaptationMode::HeadOnly => head,
            AdaptationMode::Lora => head || is_lora_param(name),
            AdaptationMode::TransformerFinetune => head || (name.starts_with("encoder.layers.") && !is_lora_param(name)),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    pub fn trainable_report(&self) -> TrainableReport {
        let mut trainable = 0;
        let mut total = 0;
        let mut by_module = BTreeMap::new();
        self.visit("", &mut |name, _, v| {
            total += v.len();
            if self.is_trainable(name) {
                trainable += v.len();
                let module = if name.starts_with("encoder.layers.") {
                    name.splitn(4, '.').take(3).collect::<Vec<_>>().join(".")
                } else {
                    name.split('.').next().unwrap_or(name).to_string()
                };
                *by_module.entry(module).or_insert(0) += v.len();
            }
        });
        TrainableReport {
            trainable,
            total,
            fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
            by_module,
        }
    }

    /// Copies every parameter into a name-keyed map.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |n, _, v| {
            out.insert(n.to_string(), v.to_vec());
        });
        out
    }
}

fn check_states(states: &[Mat], label: &str) -> Result<()> {
    for (l, s) in states.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{label}: non-finite values in hidden state {l}")));
        }
    }
    Ok(())
}

impl Parameters for EncoderModel {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit("", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.backbone.visit_mut("", f);
        self.head.visit_mut("head", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::backbone::BackboneConfig;

    fn toy_clip(seed: u64) -> Clip {
        let mut r = rng::substream(seed, "clip");
        let samples = (0..4000)
            .map(|i| (0.3 * (i as f64 * 0.05).sin() + 0.05 * (r.random::<f64>() - 0.5)) as f32)
            .collect();
        Clip::new(samples, 8000)
    }

    fn toy_model(mode: AdaptationMode) -> EncoderModel {
        let b = Backbone::random(BackboneConfig::toy(1), 1).unwrap();
        let lora = LoraConfig::default();
        EncoderModel::new(b, 16, mode, Some(&lora), 2).unwrap()
    }

    #[test]
    fn toy_shapes() {
        let m = toy_model(AdaptationMode::Frozen);
        let f = m.features(&toy_clip(0)).unwrap();
        assert_eq!(f.states.len(), 3);
        assert_eq!(f.states[0].dim(), (49, 32));
        assert_eq!(f.pooled_flat().len(), 96);
        assert_eq!(m.embed(&toy_clip(0)).unwrap().len(), 16);
    }

    #[test]
    fn wrong_rate_is_precondition_error() {
        let m = toy_model(AdaptationMode::Frozen);
        let c = Clip::new(vec![0.0; 4000], 16000);
        assert!(matches!(m.embed(&c), Err(Error::Precondition(_))));
        let short = Clip::new(vec![0.0; 100], 8000);
        assert!(matches!(m.embed(&short), Err(Error::Precondition(_))));
    }

    #[test]
    fn pooling_of_constant_states_and_scaling() {
        let states = vec![Mat::from_elem((5, 3), 2.0), Mat::from_elem((5, 3), -1.5)];
        assert_eq!(pool(&states), vec![2.0, 2.0, 2.0, -1.5, -1.5, -1.5]);
        let a = Mat::from_shape_fn((4, 2), |(t, c)| (t * 2 + c) as f64 * 0.3);
        let flat = pool(std::slice::from_ref(&a));
        let scaled = pool(&[a * 4.0]);
        for (x, y) in flat.iter().zip(&scaled) {
            assert_eq!(x * 4.0, *y);
        }
    }

    #[test]
    fn lora_identity_at_init() {
        let frozen = toy_model(AdaptationMode::Frozen);
        let mut adapted = frozen.clone();
        adapted.apply_lora(&LoraConfig::default(), 5).unwrap();
        adapted.mode = AdaptationMode::Lora;
        let c = toy_clip(1);
        let a = frozen.embed(&c).unwrap();
        let b = adapted.embed(&c).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn trainable_counts() {
        let m = toy_model(AdaptationMode::Frozen);
        assert_eq!(m.trainable_report().fraction, 0.0);
        let h = toy_model(AdaptationMode::HeadOnly);
        let r = h.trainable_report();
        assert_eq!(r.trainable, 16 * 96 + 16);
        assert_eq!(r.total, BackboneConfig::toy(1).param_count() + 16 * 96 + 16);

        let l = toy_model(AdaptationMode::Lora);
        let r = l.trainable_report();
        // rank 8 on q and v of 2 layers, 32x32 each: 8 * (32 + 32) per adapter.
        let lora = 2 * 2 * 8 * (32 + 32);
        assert_eq!(r.trainable, lora + 16 * 96 + 16);
        assert_eq!(r.total, BackboneConfig::toy(1).param_count() + lora + 16 * 96 + 16);
        assert_eq!(r.by_module["encoder.layers.0"], lora / 2);
    }

    #[test]
    fn unknown_target_rejected() {
        let b = Backbone::random(BackboneConfig::toy(1), 1).unwrap();
        let lora = LoraConfig {
            targets: vec!["gate".into()],
            ..Default::default()
        };
        assert!(matches!(
            EncoderModel::new(b, 16, AdaptationMode::Lora, Some(&lora), 2),
            Err(Error::Config(_))
        ));
    }
}
