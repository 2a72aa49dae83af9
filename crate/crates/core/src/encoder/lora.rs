//! Low-rank residual adapters on attention projections.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{join, randn_mat, Gradients, Linear, Mat, Parameters};
use crate::error::{Error, Result};
use crate::rng;

/// Attention projection that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Query, Projection::Key, Projection::Value, Projection::Output];

    /// Module name inside an attention block.
    pub fn module(self) -> &'static str {
        match self {
            Projection::Query => "q_proj",
            Projection::Key => "k_proj",
            Projection::Value => "v_proj",
            Projection::Output => "out_proj",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "query" | "q_proj" => Ok(Projection::Query),
            "key" | "k_proj" => Ok(Projection::Key),
            "value" | "v_proj" => Ok(Projection::Value),
            "output" | "out_proj" => Ok(Projection::Output),
            other => Err(Error::Config(format!(
                "unknown LoRA target {other:?}; expected query, key, value or output"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub targets: Vec<String>,
    /// Standard deviation of the Gaussian init of `A`.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            weight_decay: 0.01,
            targets: vec!["query".into(), "value".into()],
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn projections(&self) -> Result<BTreeSet<Projection>> {
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        self.targets.iter().map(|t| Projection::parse(t)).collect()
    }

    pub fn check(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("LoRA weight decay must be non-negative".into()));
        }
        self.projections().map(|_| ())
    }
}

/// Residual `scale · B · A · dropout(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `(r, in)`.
    pub a: Mat,
    /// `(out, r)`.
    pub b: Mat,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng>(rng: &mut R, base: &Linear, cfg: &LoraConfig) -> Result<Self> {
        let (d, k) = (base.out_features(), base.in_features());
        if cfg.rank > d.min(k) {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds min({d}, {k}) of the adapted weight",
                cfg.rank
            )));
        }
        Ok(Self {
            a: randn_mat(rng, cfg.rank, k, cfg.init_std),
            b: Array2::zeros((d, cfg.rank)),
            scale: cfg.scale(),
            dropout: cfg.dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
}

/// A linear projection with an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub lora: Option<LoraAdapter>,
}

pub struct AdaptedCache {
    /// Inverted-dropout mask applied to the adapter input, if any.
    mask: Option<Mat>,
    /// `dropout(x) · Aᵀ`.
    u: Option<Mat>,
}

impl AdaptedLinear {
    pub fn plain(base: Linear) -> Self {
        Self { base, lora: None }
    }

    fn mask(&self, shape: (usize, usize), p: f64, seed: u64) -> Mat {
        let mut r = rng::substream(seed, "lora-dropout");
        let keep = 1.0 / (1.0 - p);
        Array2::from_shape_simple_fn(shape, || if r.random::<f64>() < p { 0.0 } else { keep })
    }

    /// `dropout_seed` enables adapter dropout; `None` is inference mode.
    pub fn forward(&self, x: &Mat, dropout_seed: Option<u64>) -> (Mat, AdaptedCache) {
        let mut y = self.base.forward(x);
        let mut cache = AdaptedCache { mask: None, u: None };
        if let Some(l) = &self.lora {
            let mask = match dropout_seed {
                Some(seed) if l.dropout > 0.0 => Some(self.mask(x.dim(), l.dropout, seed)),
                _ => None,
            };
            let u = match &mask {
                Some(m) => (x * m).dot(&l.a.t()),
                None => x.dot(&l.a.t()),
            };
            y.scaled_add(l.scale, &u.dot(&l.b.t()));
            cache.mask = mask;
            cache.u = Some(u);
        }
        (y, cache)
    }

    /// `base_params` requests gradients of the frozen weight and bias,
    /// `lora_params` those of `A` and `B`. Returns `dx`.
    pub fn backward(
        &self,
        x: &Mat,
        cache: &AdaptedCache,
        gy: &Mat,
        prefix: &str,
        base_params: bool,
        lora_params: bool,
        grads: &mut Gradients,
    ) -> Mat {
        let mut gx = self.base.backward(x, gy, prefix, base_params, grads);
        if let (Some(l), Some(u)) = (&self.lora, &cache.u) {
            let gu = gy.dot(&l.b) * l.scale;
            if lora_params {
                let gb = gy.t().dot(u) * l.scale;
                let xd = match &cache.mask {
                    Some(m) => x * m,
                    None => x.clone(),
                };
                let ga = gu.t().dot(&xd);
                grads.add(&join(prefix, "lora_a"), ga.as_slice().unwrap());
                grads.add(&join(prefix, "lora_b"), gb.as_slice().unwrap());
            }
            let mut gxd = gu.dot(&l.a);
            if let Some(m) = &cache.mask {
                gxd *= m;
            }
            gx += &gxd;
        }
        gx
    }
}

impl Parameters for AdaptedLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.base.visit(prefix, f);
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora_a"), l.a.shape(), l.a.as_slice().unwrap());
            f(&join(prefix, "lora_b"), l.b.shape(), l.b.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.base.visit_mut(prefix, f);
        if let Some(l) = &mut self.lora {
            f(&join(prefix, "lora_a"), l.a.as_slice_mut().unwrap());
            f(&join(prefix, "lora_b"), l.b.as_slice_mut().unwrap());
        }
    }
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ops::randn;

    #[test]
    fn target_parsing() {
        assert_eq!(Projection::parse("query").unwrap(), Projection::Query);
        assert!(matches!(Projection::parse("gate"), Err(Error::Config(_))));
        let cfg = LoraConfig::default();
        cfg.check().unwrap();
        assert_eq!(cfg.scale(), 2.0);
    }

    #[test]
    fn rank_bound_enforced() {
        let mut r = rng::substream(0, "t");
        let base = Linear::new_random(&mut r, 4, 6, true);
        let cfg = LoraConfig {
            rank: 5,
            ..Default::default()
        };
        assert!(LoraAdapter::new(&mut r, &base, &cfg).is_err());
    }

    #[test]
    fn adapter_backward_matches_fd() {
        let mut r = rng::substream(4, "t");
        let base = Linear::new_random(&mut r, 6, 5, true);
        let cfg = LoraConfig {
            rank: 2,
            dropout: 0.3,
            ..Default::default()
        };
        let mut lin = AdaptedLinear {
            lora: Some(LoraAdapter::new(&mut r, &base, &cfg).unwrap()),
            base,
        };
        lin.lora.as_mut().unwrap().b.mapv_inplace(|_| randn(&mut r, 0.5));
        let x = randn_mat(&mut r, 7, 6, 1.0);
        let w = randn_mat(&mut r, 7, 5, 1.0);
        let (_, cache) = lin.forward(&x, Some(11));
        let mut g = Gradients::default();
        let gx = lin.backward(&x, &cache, &w, "p", false, true, &mut g);

        let loss = |l: &AdaptedLinear, x: &Mat| (l.forward(x, Some(11)).0 * &w).sum();
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((gx.as_slice().unwrap()[idx] - num).abs() < 1e-6);
        }
        let ga = g.get("p.lora_a").unwrap();
        for idx in 0..ga.len() {
            let mut p = lin.clone();
            let mut m = lin.clone();
            p.lora.as_mut().unwrap().a.as_slice_mut().unwrap()[idx] += h;
            m.lora.as_mut().unwrap().a.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((ga[idx] - num).abs() < 1e-6);
        }
    }
}
