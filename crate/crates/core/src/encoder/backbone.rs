//! Self-supervised-style audio backbone: strided convolutional front end,
//! feature projection, optional convolutional position embedding and a stack
//! of post-norm transformer layers. Parameter names follow the common
//! `feature_extractor` / `feature_projection` / `encoder` layout so that
//! published checkpoints load without renaming.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::{AdaptedCache, AdaptedLinear, LoraAdapter, LoraConfig, Projection};
use super::ops::{
    gelu, gelu_grad, join, randn_mat, softmax_rows, softmax_rows_backward, Gradients, LayerNorm, LayerNormCache,
    Linear, Mat, Parameters,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub id: String,
    pub revision: String,
    pub sample_rate: u32,
    /// Zero-mean, unit-variance normalization of the waveform before the front end.
    pub normalize_input: bool,
    pub conv_dim: Vec<usize>,
    pub conv_kernel: Vec<usize>,
    pub conv_stride: Vec<usize>,
    pub conv_bias: bool,
    /// Per-channel group norm after the first convolution.
    pub group_norm_first: bool,
    /// When set, the first convolution's channels are (cosine, sine) pairs and
    /// the layer emits `ln(floor + energy)` per pair instead of GELU activations.
    #[serde(default)]
    pub log_energy_floor: Option<f64>,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    /// Kernel of the positional convolution; 0 disables it.
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub layer_norm_eps: f64,
    /// Whether the (inference-unused) mask embedding vector is part of the weights.
    pub masked_spec_embed: bool,
    pub max_seconds: f64,
}

impl BackboneConfig {
    /// Small backbone for tests and CI: one convolution, two attention blocks.
    pub fn toy(seed: u64) -> Self {
        Self {
            id: "toy".into(),
            revision: format!("seed-{seed}"),
            sample_rate: 8000,
            normalize_input: true,
            conv_dim: vec![64],
            conv_kernel: vec![160],
            conv_stride: vec![80],
            conv_bias: false,
            group_norm_first: false,
            log_energy_floor: Some(1e-5),
            hidden_size: 32,
            num_heads: 4,
            intermediate_size: 64,
            num_layers: 2,
            pos_conv_kernel: 0,
            pos_conv_groups: 1,
            layer_norm_eps: 1e-5,
            masked_spec_embed: false,
            max_seconds: 30.0,
        }
    }

    /// Shape of the published 95M-parameter music backbone (weights loaded separately).
    pub fn mert_95m() -> Self {
        Self {
            id: "m-a-p/MERT-v1-95M".into(),
            revision: "main".into(),
            sample_rate: 24_000,
            normalize_input: true,
            conv_dim: vec![512; 7],
            conv_kernel: vec![10, 3, 3, 3, 3, 2, 2],
            conv_stride: vec![5, 2, 2, 2, 2, 2, 2],
            conv_bias: false,
            group_norm_first: true,
            log_energy_floor: None,
            hidden_size: 768,
            num_heads: 12,
            intermediate_size: 3072,
            num_layers: 12,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            layer_norm_eps: 1e-5,
            masked_spec_embed: true,
            max_seconds: 30.0,
        }
    }

    /// Hidden-state count: the embedding output plus one per transformer layer.
    pub fn num_hidden_states(&self) -> usize {
        self.num_layers + 1
    }

    pub fn flat_dim(&self) -> usize {
        self.num_hidden_states() * self.hidden_size
    }

    pub fn check(&self) -> Result<()> {
        let n = self.conv_dim.len();
        if n == 0 || self.conv_kernel.len() != n || self.conv_stride.len() != n {
            return Err(Error::Config("conv_dim, conv_kernel and conv_stride must be non-empty and equally long".into()));
        }
        if self.conv_kernel.contains(&0) || self.conv_stride.contains(&0) {
            return Err(Error::Config("conv kernels and strides must be positive".into()));
        }
        if self.hidden_size == 0 || self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.pos_conv_kernel > 0 && (self.pos_conv_groups == 0 || !self.hidden_size.is_multiple_of(self.pos_conv_groups)) {
            return Err(Error::Config("hidden_size must be divisible by pos_conv_groups".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if let Some(floor) = self.log_energy_floor {
            if !self.conv_dim[0].is_multiple_of(2) || self.group_norm_first || !(floor > 0.0) {
                return Err(Error::Config(
                    "log_energy_floor needs a positive floor, an even first conv_dim and no group norm".into(),
                ));
            }
        }
        Ok(())
    }

    /// Channels leaving convolution `i`.
    pub fn conv_out_dim(&self, i: usize) -> usize {
        if i == 0 && self.log_energy_floor.is_some() {
            self.conv_dim[0] / 2
        } else {
            self.conv_dim[i]
        }
    }

    /// Input samples between consecutive frames.
    pub fn hop_samples(&self) -> usize {
        self.conv_stride.iter().product()
    }

    /// Frames produced for `samples` input samples.
    pub fn num_frames(&self, samples: usize) -> usize {
        let mut len = samples;
        for (&k, &s) in self.conv_kernel.iter().zip(&self.conv_stride) {
            if len < k {
                return 0;
            }
            len = (len - k) / s + 1;
        }
        len
    }

    /// Every base parameter name and shape, in registry order, without allocating weights.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, (&c, &k)) in self.conv_dim.iter().zip(&self.conv_kernel).enumerate() {
            let p = format!("feature_extractor.conv_layers.{i}");
            out.push((format!("{p}.conv.weight"), vec![c, c_in, k]));
            if self.conv_bias {
                out.push((format!("{p}.conv.bias"), vec![c]));
            }
            if i == 0 && self.group_norm_first {
                out.push((format!("{p}.layer_norm.weight"), vec![c]));
                out.push((format!("{p}.layer_norm.bias"), vec![c]));
            }
            c_in = self.conv_out_dim(i);
        }
        let d = self.hidden_size;
        out.push(("feature_projection.layer_norm.weight".into(), vec![c_in]));
        out.push(("feature_projection.layer_norm.bias".into(), vec![c_in]));
        out.push(("feature_projection.projection.weight".into(), vec![d, c_in]));
        out.push(("feature_projection.projection.bias".into(), vec![d]));
        if self.pos_conv_kernel > 0 {
            let k = self.pos_conv_kernel;
            out.push(("encoder.pos_conv_embed.conv.weight_g".into(), vec![1, 1, k]));
            out.push(("encoder.pos_conv_embed.conv.weight_v".into(), vec![d, d / self.pos_conv_groups, k]));
            out.push(("encoder.pos_conv_embed.conv.bias".into(), vec![d]));
        }
        out.push(("encoder.layer_norm.weight".into(), vec![d]));
        out.push(("encoder.layer_norm.bias".into(), vec![d]));
        let f = self.intermediate_size;
        for i in 0..self.num_layers {
            let p = format!("encoder.layers.{i}");
            for proj in Projection::ALL {
                out.push((format!("{p}.attention.{}.weight", proj.module()), vec![d, d]));
                out.push((format!("{p}.attention.{}.bias", proj.module()), vec![d]));
            }
            out.push((format!("{p}.layer_norm.weight"), vec![d]));
            out.push((format!("{p}.layer_norm.bias"), vec![d]));
            out.push((format!("{p}.feed_forward.intermediate_dense.weight"), vec![f, d]));
            out.push((format!("{p}.feed_forward.intermediate_dense.bias"), vec![f]));
            out.push((format!("{p}.feed_forward.output_dense.weight"), vec![d, f]));
            out.push((format!("{p}.feed_forward.output_dense.bias"), vec![d]));
            out.push((format!("{p}.final_layer_norm.weight"), vec![d]));
            out.push((format!("{p}.final_layer_norm.bias"), vec![d]));
        }
        if self.masked_spec_embed {
            out.push(("masked_spec_embed".into(), vec![d]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(out, in, kernel)`.
    pub weight: Array3<f64>,
    pub bias: Option<Array1<f64>>,
    /// Per-channel group norm affine parameters.
    pub norm: Option<(Array1<f64>, Array1<f64>)>,
    pub stride: usize,
    pub log_energy_floor: Option<f64>,
}

impl ConvLayer {
    /// `x` is `(len, in)`; returns `(frames, out)` after norm and GELU.
    fn forward(&self, x: &Mat) -> Mat {
        let (c_out, c_in, k) = self.weight.dim();
        let frames = (x.nrows() - k) / self.stride + 1;
        let mut patches = Array2::zeros((frames, c_in * k));
        for t in 0..frames {
            let start = t * self.stride;
            for c in 0..c_in {
                for j in 0..k {
                    patches[[t, c * k + j]] = x[[start + j, c]];
                }
            }
        }
        let w = self.weight.view().into_shape_with_order((c_out, c_in * k)).unwrap();
        let mut y = patches.dot(&w.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        if let Some((g, b)) = &self.norm {
            let n = y.nrows() as f64;
            for (ci, mut col) in y.axis_iter_mut(Axis(1)).enumerate() {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                col.mapv_inplace(|v| (v - mean) * inv * g[ci] + b[ci]);
            }
        }
        if let Some(floor) = self.log_energy_floor {
            return Array2::from_shape_fn((y.nrows(), c_out / 2), |(t, c)| {
                (floor + y[[t, 2 * c]].powi(2) + y[[t, 2 * c + 1]].powi(2)).ln()
            });
        }
        y.mapv_inplace(gelu);
        y
    }
}

/// Grouped convolution with weight normalization over the kernel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PosConv {
    /// `(1, 1, kernel)`.
    pub weight_g: Array3<f64>,
    /// `(out, in / groups, kernel)`.
    pub weight_v: Array3<f64>,
    pub bias: Array1<f64>,
    pub groups: usize,
}

impl PosConv {
    fn effective_weight(&self) -> Array3<f64> {
        let mut w = self.weight_v.clone();
        for (j, mut slab) in w.axis_iter_mut(Axis(2)).enumerate() {
            let norm = slab.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { self.weight_g[[0, 0, j]] / norm } else { 0.0 };
            slab.mapv_inplace(|v| v * scale);
        }
        w
    }

    /// `h` is `(frames, dim)`; returns the same shape.
    fn forward(&self, h: &Mat) -> Mat {
        let w = self.effective_weight();
        let (d, cg, k) = w.dim();
        let t = h.nrows();
        let pad = k / 2;
        let t_out = t + 2 * pad + 1 - k;
        let mut y = Array2::zeros((t_out, d));
        for g in 0..self.groups {
            let c0 = g * cg;
            let mut patches = Array2::zeros((t_out, cg * k));
            for o in 0..t_out {
                for j in 0..k {
                    let src = o + j;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    for c in 0..cg {
                        patches[[o, c * k + j]] = h[[src - pad, c0 + c]];
                    }
                }
            }
            let wg = w.slice(s![c0..c0 + cg, .., ..]).to_owned().into_shape_with_order((cg, cg * k)).unwrap();
            y.slice_mut(s![.., c0..c0 + cg]).assign(&patches.dot(&wg.t()));
        }
        let mut y = y.slice(s![..t, ..]).to_owned();
        y += &self.bias;
        y.mapv_inplace(gelu);
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q_proj: AdaptedLinear,
    pub k_proj: AdaptedLinear,
    pub v_proj: AdaptedLinear,
    pub out_proj: AdaptedLinear,
    pub num_heads: usize,
}

impl Attention {
    pub fn proj(&self, p: Projection) -> &AdaptedLinear {
        match p {
            Projection::Query => &self.q_proj,
            Projection::Key => &self.k_proj,
            Projection::Value => &self.v_proj,
            Projection::Output => &self.out_proj,
        }
    }

    pub fn proj_mut(&mut self, p: Projection) -> &mut AdaptedLinear {
        match p {
            Projection::Query => &mut self.q_proj,
            Projection::Key => &mut self.k_proj,
            Projection::Value => &mut self.v_proj,
            Projection::Output => &mut self.out_proj,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: Attention,
    pub layer_norm: LayerNorm,
    pub intermediate_dense: Linear,
    pub output_dense: Linear,
    pub final_layer_norm: LayerNorm,
}

pub struct LayerCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    caches: [AdaptedCache; 4],
    probs: Vec<Mat>,
    ctx: Mat,
    ln1: LayerNormCache,
    h1: Mat,
    pre_act: Mat,
    act: Mat,
    ln2: LayerNormCache,
}

/// Which parameter groups of a layer receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub base: bool,
    pub lora: bool,
}

fn dropout_seed(item: Option<u64>, layer: usize, p: Projection) -> Option<u64> {
    item.map(|s| rng::derive_seed(s, &[&layer.to_string(), p.module()]))
}

impl EncoderLayer {
    fn forward_cached(&self, x: &Mat, index: usize, dropout: Option<u64>) -> (Mat, LayerCache) {
        let a = &self.attention;
        let (q, qc) = a.q_proj.forward(x, dropout_seed(dropout, index, Projection::Query));
        let (k, kc) = a.k_proj.forward(x, dropout_seed(dropout, index, Projection::Key));
        let (v, vc) = a.v_proj.forward(x, dropout_seed(dropout, index, Projection::Value));
        let d = x.ncols();
        let hd = d / a.num_heads;
        let scale = (hd as f64).powf(-0.5);
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(a.num_heads);
        for h in 0..a.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let (attn, oc) = a.out_proj.forward(&ctx, dropout_seed(dropout, index, Projection::Output));
        let r1 = x + &attn;
        let (h1, ln1) = self.layer_norm.forward(&r1);
        let pre_act = self.intermediate_dense.forward(&h1);
        let act = pre_act.mapv(gelu);
        let r2 = &h1 + &self.output_dense.forward(&act);
        let (y, ln2) = self.final_layer_norm.forward(&r2);
        let cache = LayerCache {
            x: x.clone(),
            q,
            k,
            v,
            caches: [qc, kc, vc, oc],
            probs,
            ctx,
            ln1,
            h1,
            pre_act,
            act,
            ln2,
        };
        (y, cache)
    }

    fn backward(&self, c: &LayerCache, gy: &Mat, prefix: &str, t: GradTargets, grads: &mut Gradients) -> Mat {
        let a = &self.attention;
        let g_r2 = self.final_layer_norm.backward(&c.ln2, gy, &join(prefix, "final_layer_norm"), t.base, grads);
        let mut g_h1 = g_r2.clone();
        let ff = join(prefix, "feed_forward");
        let g_act = self.output_dense.backward(&c.act, &g_r2, &join(&ff, "output_dense"), t.base, grads);
        let g_pre = g_act * &c.pre_act.mapv(gelu_grad);
        g_h1 += &self.intermediate_dense.backward(&c.h1, &g_pre, &join(&ff, "intermediate_dense"), t.base, grads);
        let g_r1 = self.layer_norm.backward(&c.ln1, &g_h1, &join(prefix, "layer_norm"), t.base, grads);

        let ap = join(prefix, "attention");
        let g_ctx = a.out_proj.backward(&c.ctx, &c.caches[3], &g_r1, &join(&ap, "out_proj"), t.base, t.lora, grads);
        let d = c.x.ncols();
        let hd = d / a.num_heads;
        let scale = (hd as f64).powf(-0.5);
        let mut gq = Array2::zeros(c.q.raw_dim());
        let mut gk = Array2::zeros(c.k.raw_dim());
        let mut gv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let gc = g_ctx.slice(cols);
            let gp = gc.dot(&c.v.slice(cols).t());
            gv.slice_mut(cols).assign(&p.t().dot(&gc));
            let gs = softmax_rows_backward(p, &gp) * scale;
            gq.slice_mut(cols).assign(&gs.dot(&c.k.slice(cols)));
            gk.slice_mut(cols).assign(&gs.t().dot(&c.q.slice(cols)));
        }
        let mut gx = g_r1;
        gx += &a.q_proj.backward(&c.x, &c.caches[0], &gq, &join(&ap, "q_proj"), t.base, t.lora, grads);
        gx += &a.k_proj.backward(&c.x, &c.caches[1], &gk, &join(&ap, "k_proj"), t.base, t.lora, grads);
        gx += &a.v_proj.backward(&c.x, &c.caches[2], &gv, &join(&ap, "v_proj"), t.base, t.lora, grads);
        gx
    }
}

impl Parameters for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let ap = join(prefix, "attention");
        for p in Projection::ALL {
            self.attention.proj(p).visit(&join(&ap, p.module()), f);
        }
        self.layer_norm.visit(&join(prefix, "layer_norm"), f);
        self.intermediate_dense.visit(&join(prefix, "feed_forward.intermediate_dense"), f);
        self.output_dense.visit(&join(prefix, "feed_forward.output_dense"), f);
        self.final_layer_norm.visit(&join(prefix, "final_layer_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let ap = join(prefix, "attention");
        for p in Projection::ALL {
            self.attention.proj_mut(p).visit_mut(&join(&ap, p.module()), f);
        }
        self.layer_norm.visit_mut(&join(prefix, "layer_norm"), f);
        self.intermediate_dense.visit_mut(&join(prefix, "feed_forward.intermediate_dense"), f);
        self.output_dense.visit_mut(&join(prefix, "feed_forward.output_dense"), f);
        self.final_layer_norm.visit_mut(&join(prefix, "final_layer_norm"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub conv_layers: Vec<ConvLayer>,
    pub projection_norm: LayerNorm,
    pub projection: Linear,
    pub pos_conv: Option<PosConv>,
    pub encoder_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub masked_spec_embed: Option<Array1<f64>>,
}

/// Hann-windowed filterbank with log-spaced centres between 100 Hz and
/// 0.45·rate. With `quadrature`, channels come in (cosine, sine) pairs per centre.
fn filterbank(channels: usize, kernel: usize, rate: f64, quadrature: bool) -> Array3<f64> {
    let lo: f64 = 100.0;
    let hi = 0.45 * rate;
    let bands = if quadrature { channels / 2 } else { channels };
    let mut w = Array3::zeros((channels, 1, kernel));
    for c in 0..channels {
        let band = if quadrature { c / 2 } else { c };
        let phase = if quadrature && c % 2 == 1 { -std::f64::consts::FRAC_PI_2 } else { 0.0 };
        let frac = if bands > 1 { band as f64 / (bands - 1) as f64 } else { 0.5 };
        let f = lo * (hi / lo).powf(frac);
        let mut energy = 0.0;
        for n in 0..kernel {
            let win = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (kernel - 1).max(1) as f64).cos();
            let v = win * (2.0 * std::f64::consts::PI * f * n as f64 / rate + phase).cos();
            w[[c, 0, n]] = v;
            energy += v * v;
        }
        let norm = energy.sqrt().max(1e-12);
        w.slice_mut(s![c, 0, ..]).mapv_inplace(|v| v / norm);
    }
    w
}

impl Backbone {
    /// Seeded random weights with the given shape; the first convolution of a
    /// single-channel input is a fixed filterbank so the toy front end is
    /// frequency-selective.
    pub fn random(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut r = rng::substream(seed, "backbone-init");
        let mut conv_layers = Vec::new();
        let mut c_in = 1;
        for (i, ((&c, &k), &st)) in cfg.conv_dim.iter().zip(&cfg.conv_kernel).zip(&cfg.conv_stride).enumerate() {
            let weight = if i == 0 {
                filterbank(c, k, f64::from(cfg.sample_rate), cfg.log_energy_floor.is_some())
            } else {
                super::ops::randn_arr3(&mut r, (c, c_in, k), 1.0 / ((c_in * k) as f64).sqrt())
            };
            conv_layers.push(ConvLayer {
                weight,
                bias: cfg.conv_bias.then(|| Array1::zeros(c)),
                norm: (i == 0 && cfg.group_norm_first).then(|| (Array1::ones(c), Array1::zeros(c))),
                stride: st,
                log_energy_floor: if i == 0 { cfg.log_energy_floor } else { None },
            });
            c_in = cfg.conv_out_dim(i);
        }
        let d = cfg.hidden_size;
        let pos_conv = (cfg.pos_conv_kernel > 0).then(|| {
            let k = cfg.pos_conv_kernel;
            let cg = d / cfg.pos_conv_groups;
            PosConv {
                weight_g: Array3::ones((1, 1, k)),
                weight_v: super::ops::randn_arr3(&mut r, (d, cg, k), 1.0),
                bias: Array1::zeros(d),
                groups: cfg.pos_conv_groups,
            }
        });
        let eps = cfg.layer_norm_eps;
        let linear = |r: &mut rng::StreamRng, i: usize, o: usize| Linear {
            weight: randn_mat(r, o, i, 1.0 / (i as f64).sqrt()),
            bias: Some(Array1::from_shape_simple_fn(o, || 0.02 * (r.random::<f64>() - 0.5))),
        };
        let projection = linear(&mut r, c_in, d);
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer {
                attention: Attention {
                    q_proj: AdaptedLinear::plain(linear(&mut r, d, d)),
                    k_proj: AdaptedLinear::plain(linear(&mut r, d, d)),
                    v_proj: AdaptedLinear::plain(linear(&mut r, d, d)),
                    out_proj: AdaptedLinear::plain(linear(&mut r, d, d)),
                    num_heads: cfg.num_heads,
                },
                layer_norm: LayerNorm::new(d, eps),
                intermediate_dense: linear(&mut r, d, cfg.intermediate_size),
                output_dense: linear(&mut r, cfg.intermediate_size, d),
                final_layer_norm: LayerNorm::new(d, eps),
            })
            .collect();
        Ok(Self {
            projection_norm: LayerNorm::new(c_in, eps),
            projection,
            pos_conv,
            encoder_norm: LayerNorm::new(d, eps),
            layers,
            masked_spec_embed: cfg.masked_spec_embed.then(|| Array1::zeros(d)),
            conv_layers,
            cfg,
        })
    }

    /// Attaches fresh adapters to the configured projections of every layer.
    pub fn apply_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        cfg.check()?;
        let targets = cfg.projections()?;
        let mut r = rng::substream(seed, "lora-init");
        for layer in &mut self.layers {
            for &p in &targets {
                let proj = layer.attention.proj_mut(p);
                proj.lora = Some(LoraAdapter::new(&mut r, &proj.base, cfg)?);
            }
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.layers
            .iter()
            .any(|l| Projection::ALL.iter().any(|&p| l.attention.proj(p).lora.is_some()))
    }

    /// Frozen stage: waveform to the first hidden state `(frames, hidden)`.
    pub fn embed_frames(&self, samples: &[f64]) -> Mat {
        let mut x = Array2::from_shape_vec((samples.len(), 1), samples.to_vec()).unwrap();
        if self.cfg.normalize_input && !samples.is_empty() {
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-7).sqrt();
            x.mapv_inplace(|v| (v - mean) * inv);
        }
        for conv in &self.conv_layers {
            x = conv.forward(&x);
        }
        let (x, _) = self.projection_norm.forward(&x);
        let mut h = self.projection.forward(&x);
        if let Some(pc) = &self.pos_conv {
            h = &h + &pc.forward(&h);
        }
        self.encoder_norm.forward(&h).0
    }

    /// All hidden states starting from the first one.
    pub fn run_layers(&self, h0: Mat, dropout: Option<u64>) -> Vec<Mat> {
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        states.push(h0);
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, _) = layer.forward_cached(states.last().unwrap(), i, dropout);
            states.push(y);
        }
        states
    }

    pub fn run_layers_cached(&self, h0: Mat, dropout: Option<u64>) -> (Vec<Mat>, Vec<LayerCache>) {
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        states.push(h0);
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward_cached(states.last().unwrap(), i, dropout);
            states.push(y);
            caches.push(c);
        }
        (states, caches)
    }

    /// Backpropagates per-state gradients `g_states[l]` (one per hidden state)
    /// through the transformer layers.
    pub fn backward_layers(&self, caches: &[LayerCache], mut g_states: Vec<Mat>, t: GradTargets, grads: &mut Gradients) {
        for i in (0..self.layers.len()).rev() {
            let gy = std::mem::take(&mut g_states[i + 1]);
            let gx = self.layers[i].backward(&caches[i], &gy, &format!("encoder.layers.{i}"), t, grads);
            g_states[i] += &gx;
        }
    }
}

impl Parameters for Backbone {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, c) in self.conv_layers.iter().enumerate() {
            let p = format!("feature_extractor.conv_layers.{i}");
            f(&format!("{p}.conv.weight"), c.weight.shape(), c.weight.as_slice().unwrap());
            if let Some(b) = &c.bias {
                f(&format!("{p}.conv.bias"), b.shape(), b.as_slice().unwrap());
            }
            if let Some((g, b)) = &c.norm {
                f(&format!("{p}.layer_norm.weight"), g.shape(), g.as_slice().unwrap());
                f(&format!("{p}.layer_norm.bias"), b.shape(), b.as_slice().unwrap());
            }
        }
        self.projection_norm.visit("feature_projection.layer_norm", f);
        self.projection.visit("feature_projection.projection", f);
        if let Some(pc) = &self.pos_conv {
            let p = "encoder.pos_conv_embed.conv";
            f(&format!("{p}.weight_g"), pc.weight_g.shape(), pc.weight_g.as_slice().unwrap());
            f(&format!("{p}.weight_v"), pc.weight_v.shape(), pc.weight_v.as_slice().unwrap());
            f(&format!("{p}.bias"), pc.bias.shape(), pc.bias.as_slice().unwrap());
        }
        self.encoder_norm.visit("encoder.layer_norm", f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("encoder.layers.{i}"), f);
        }
        if let Some(m) = &self.masked_spec_embed {
            f("masked_spec_embed", m.shape(), m.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, c) in self.conv_layers.iter_mut().enumerate() {
            let p = format!("feature_extractor.conv_layers.{i}");
            f(&format!("{p}.conv.weight"), c.weight.as_slice_mut().unwrap());
            if let Some(b) = &mut c.bias {
                f(&format!("{p}.conv.bias"), b.as_slice_mut().unwrap());
            }
            if let Some((g, b)) = &mut c.norm {
                f(&format!("{p}.layer_norm.weight"), g.as_slice_mut().unwrap());
                f(&format!("{p}.layer_norm.bias"), b.as_slice_mut().unwrap());
            }
        }
        self.projection_norm.visit_mut("feature_projection.layer_norm", f);
        self.projection.visit_mut("feature_projection.projection", f);
        if let Some(pc) = &mut self.pos_conv {
            let p = "encoder.pos_conv_embed.conv";
            f(&format!("{p}.weight_g"), pc.weight_g.as_slice_mut().unwrap());
            f(&format!("{p}.weight_v"), pc.weight_v.as_slice_mut().unwrap());
            f(&format!("{p}.bias"), pc.bias.as_slice_mut().unwrap());
        }
        self.encoder_norm.visit_mut("encoder.layer_norm", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.layers.{i}"), f);
        }
        if let Some(m) = &mut self.masked_spec_embed {
            f("masked_spec_embed", m.as_slice_mut().unwrap());
        }
    }
}
