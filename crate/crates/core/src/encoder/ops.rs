//! Dense building blocks with explicit backward passes, all in `f64`.
//!
//! Activations are `(frames, features)` matrices. Weights follow the
//! `(out, in)` convention, so a linear layer computes `x · Wᵀ + b`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = Array2<f64>;

/// Visits named parameters as flat slices in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Accumulated gradients keyed by parameter path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn add(&mut self, name: &str, g: &[f64]) {
        match self.map.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    /// Adds `other` into `self`, name by name.
    pub fn merge(&mut self, other: &Gradients) {
        for (k, v) in &other.map {
            self.add(k, v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

pub(crate) fn randn<R: Rng>(rng: &mut R, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

pub(crate) fn randn_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || randn(rng, std))
}

pub(crate) fn randn_arr3<R: Rng>(rng: &mut R, shape: (usize, usize, usize), std: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || randn(rng, std))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn new_random<R: Rng>(rng: &mut R, input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: randn_mat(rng, output, input, 1.0 / (input as f64).sqrt()),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Returns `dx`; parameter gradients go into `grads` when `params` is set.
    pub fn backward(&self, x: &Mat, gy: &Mat, prefix: &str, params: bool, grads: &mut Gradients) -> Mat {
        if params {
            let gw = gy.t().dot(x);
            grads.add(&join(prefix, "weight"), gw.as_slice().unwrap());
            if self.bias.is_some() {
                let gb = gy.sum_axis(Axis(0));
                grads.add(&join(prefix, "bias"), gb.as_slice().unwrap());
            }
        }
        gy.dot(&self.weight)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), self.weight.shape(), self.weight.as_slice().unwrap());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b.shape(), b.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice_mut().unwrap());
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b.as_slice_mut().unwrap());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps,
        }
    }

    /// Normalizes each row.
    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + self.eps).sqrt();
            let k = *s;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, gy: &Mat, prefix: &str, params: bool, grads: &mut Gradients) -> Mat {
        if params {
            let gg = (gy * &cache.xhat).sum_axis(Axis(0));
            let gb = gy.sum_axis(Axis(0));
            grads.add(&join(prefix, "weight"), gg.as_slice().unwrap());
            grads.add(&join(prefix, "bias"), gb.as_slice().unwrap());
        }
        let d = gy.ncols() as f64;
        let gxhat = gy * &self.gamma;
        let mut gx = Mat::zeros(gy.raw_dim());
        for (((mut out, g), xh), &s) in gx
            .rows_mut()
            .into_iter()
            .zip(gxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = s * (gi - mean_g - xi * mean_gx);
            }
        }
        gx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), self.gamma.shape(), self.gamma.as_slice().unwrap());
        f(&join(prefix, "bias"), self.beta.shape(), self.beta.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.gamma.as_slice_mut().unwrap());
        f(&join(prefix, "bias"), self.beta.as_slice_mut().unwrap());
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise softmax.
pub fn softmax_rows(s: &Mat) -> Mat {
    let mut p = s.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Gradient of row-wise softmax: `P ⊙ (gP − rowsum(gP ⊙ P))`.
pub fn softmax_rows_backward(p: &Mat, gp: &Mat) -> Mat {
    let mut gs = gp * p;
    for (mut row, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        for (g, &pv) in row.iter_mut().zip(prow.iter()) {
            *g -= pv * dot;
        }
    }
    gs
}
