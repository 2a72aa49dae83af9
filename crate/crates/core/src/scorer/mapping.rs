//! Distance-to-subjective-score mappings: least-squares cubic and a small MLP.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAPPING_FORMAT: &str = "aqlearn-mapping";
pub const MAPPING_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ScaleBounds {
    pub const MOS: ScaleBounds = ScaleBounds { lo: 1.0, hi: 5.0 };
    pub const MUSHRA: ScaleBounds = ScaleBounds { lo: 0.0, hi: 100.0 };

    pub fn check(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Config(format!("invalid scale bounds [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Weights of the 1→H→H→1 network; inputs are standardised with `x_mean`/`x_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub x_mean: f64,
    pub x_std: f64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `(H, H)`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingParams {
    /// `c0 + c1 x + c2 x² + c3 x³`.
    Cubic { coefficients: [f64; 4] },
    Mlp(MlpParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMapping {
    pub format: String,
    pub version: u32,
    pub params: MappingParams,
    /// Evaluate at `-distance` so the fitted curve increases with quality.
    pub negate_input: bool,
    pub bounds: ScaleBounds,
    /// Mean squared residual on the fitting points, before clamping.
    pub fit_mse: f64,
    pub fit_points: usize,
    /// Hash of the calibration item keys the mapping was fitted on.
    pub calibration_hash: Option<String>,
}

impl DistanceMapping {
    fn new(params: MappingParams, bounds: ScaleBounds, fit_mse: f64, fit_points: usize) -> Self {
        Self {
            format: MAPPING_FORMAT.into(),
            version: MAPPING_VERSION,
            params,
            negate_input: false,
            bounds,
            fit_mse,
            fit_points,
            calibration_hash: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.params {
            MappingParams::Cubic { .. } => "cubic",
            MappingParams::Mlp(_) => "mlp",
        }
    }

    /// Mapping output before clamping, at input `x` (already negated if applicable).
    pub fn raw(&self, x: f64) -> f64 {
        match &self.params {
            MappingParams::Cubic { coefficients: c } => c[0] + x * (c[1] + x * (c[2] + x * c[3])),
            MappingParams::Mlp(p) => self.bounds.lo + (self.bounds.hi - self.bounds.lo) * mlp_forward(p, x).0,
        }
    }

    /// Score for a distance, clamped to the scale bounds.
    pub fn apply(&self, distance: f64) -> f64 {
        let x = if self.negate_input { -distance } else { distance };
        self.bounds.clamp(self.raw(x))
    }

    /// Whether the unclamped mapping strictly increases in quality (that is,
    /// decreases in distance when `negate_input`) on `samples` points spanning
    /// `[d_lo, d_hi]`.
    pub fn is_monotone_over(&self, d_lo: f64, d_hi: f64, samples: usize) -> bool {
        let n = samples.max(2);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..n {
            let d = if self.negate_input {
                d_hi - (d_hi - d_lo) * k as f64 / (n - 1) as f64
            } else {
                d_lo + (d_hi - d_lo) * k as f64 / (n - 1) as f64
            };
            let x = if self.negate_input { -d } else { d };
            let v = self.raw(x);
            if v <= prev {
                return false;
            }
            prev = v;
        }
        true
    }

    /// Fits on distances with the orientation flipped so larger inputs mean better quality.
    pub fn fit_distances(distances: &[f64], subjective: &[f64], bounds: ScaleBounds, mlp: Option<&MlpConfig>) -> Result<Self> {
        let x: Vec<f64> = distances.iter().map(|d| -d).collect();
        let mut m = match mlp {
            None => fit_cubic(&x, subjective, bounds)?,
            Some(cfg) => fit_mlp(&x, subjective, bounds, cfg)?,
        };
        m.negate_input = true;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if m.format != MAPPING_FORMAT || m.version != MAPPING_VERSION {
            return Err(Error::Serde(format!(
                "{}: expected {MAPPING_FORMAT} v{MAPPING_VERSION}, found {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        m.bounds.check()?;
        Ok(m)
    }
}

fn check_points(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Fit(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::Fit(format!("need at least {min} points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite input or target".into()));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(Error::Fit("all inputs are equal".into()));
    }
    Ok(())
}

/// Least-squares cubic via normal equations on a design matrix whose
/// columns are powers of `x / max|x|`.
pub fn fit_cubic(x: &[f64], y: &[f64], bounds: ScaleBounds) -> Result<DistanceMapping> {
    bounds.check()?;
    check_points(x, y, 5)?;
    let s = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = x.len();
    let a = DMatrix::from_fn(n, 4, |i, k| (x[i] / s).powi(k as i32));
    let g = a.transpose() * &a;
    let eig = SymmetricEigen::new(g.clone());
    let (min, max) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if min <= max * 1e-12 {
        let mut distinct = x.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        return Err(Error::Fit(format!(
            "rank-deficient cubic design ({} distinct inputs); use a lower-degree mapping",
            distinct.len()
        )));
    }
    let rhs = a.transpose() * DVector::from_column_slice(y);
    let beta = g
        .cholesky()
        .ok_or_else(|| Error::Fit("normal equations are not positive definite".into()))?
        .solve(&rhs);
    let coefficients = [beta[0], beta[1] / s, beta[2] / (s * s), beta[3] / (s * s * s)];
    let mut m = DistanceMapping::new(MappingParams::Cubic { coefficients }, bounds, 0.0, n);
    m.fit_mse = x.iter().zip(y).map(|(&xi, &yi)| (yi - m.raw(xi)).powi(2)).sum::<f64>() / n as f64;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 4000,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct MlpTrace {
    u: f64,
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: f64,
}

/// Output in (0, 1) and the activations needed for backprop.
fn mlp_forward(p: &MlpParams, x: f64) -> (f64, MlpTrace) {
    let h = p.b1.len();
    let u = (x - p.x_mean) / p.x_std;
    let a1: Vec<f64> = (0..h).map(|j| (p.w1[j] * u + p.b1[j]).max(0.0)).collect();
    let a2: Vec<f64> = (0..h)
        .map(|i| {
            let z: f64 = (0..h).map(|j| p.w2[i * h + j] * a1[j]).sum::<f64>() + p.b2[i];
            z.max(0.0)
        })
        .collect();
    let z3: f64 = a2.iter().zip(&p.w3).map(|(a, w)| a * w).sum::<f64>() + p.b3;
    let out = sigmoid(z3);
    (out, MlpTrace { u, a1, a2, out })
}

/// Flat view for the optimiser, in a fixed order.
fn flatten(p: &MlpParams) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend(&p.w1);
    v.extend(&p.b1);
    v.extend(&p.w2);
    v.extend(&p.b2);
    v.extend(&p.w3);
    v.push(p.b3);
    v
}

fn unflatten(p: &mut MlpParams, v: &[f64]) {
    let h = p.b1.len();
    let mut o = 0;
    for dst in [&mut p.w1, &mut p.b1] {
        dst.copy_from_slice(&v[o..o + h]);
        o += h;
    }
    p.w2.copy_from_slice(&v[o..o + h * h]);
    o += h * h;
    p.b2.copy_from_slice(&v[o..o + h]);
    o += h;
    p.w3.copy_from_slice(&v[o..o + h]);
    o += h;
    p.b3 = v[o];
}

/// Gradient of `(out - t)²` in the [`flatten`] order, added into `g`.
fn mlp_backward(p: &MlpParams, tr: &MlpTrace, t: f64, g: &mut [f64]) {
    let h = p.b1.len();
    let (o_w1, o_b1, o_w2, o_b2, o_w3, o_b3) = (0, h, 2 * h, 2 * h + h * h, 3 * h + h * h, 4 * h + h * h);
    let dz3 = 2.0 * (tr.out - t) * tr.out * (1.0 - tr.out);
    let mut dz2 = vec![0.0; h];
    for i in 0..h {
        g[o_w3 + i] += dz3 * tr.a2[i];
        if tr.a2[i] > 0.0 {
            dz2[i] = dz3 * p.w3[i];
        }
    }
    g[o_b3] += dz3;
    let mut da1 = vec![0.0; h];
    for i in 0..h {
        if dz2[i] == 0.0 {
            continue;
        }
        g[o_b2 + i] += dz2[i];
        for j in 0..h {
            g[o_w2 + i * h + j] += dz2[i] * tr.a1[j];
            da1[j] += dz2[i] * p.w2[i * h + j];
        }
    }
    for j in 0..h {
        if tr.a1[j] > 0.0 {
            g[o_w1 + j] += da1[j] * tr.u;
            g[o_b1 + j] += da1[j];
        }
    }
}

/// Full-batch Adam on mean squared error, with targets rescaled to [0, 1].
pub fn fit_mlp(x: &[f64], y: &[f64], bounds: ScaleBounds, cfg: &MlpConfig) -> Result<DistanceMapping> {
    bounds.check()?;
    check_points(x, y, 20)?;
    if cfg.hidden == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("mlp needs hidden > 0, epochs > 0 and a positive learning rate".into()));
    }
    let n = x.len() as f64;
    let h = cfg.hidden;
    let x_mean = x.iter().sum::<f64>() / n;
    let x_std = (x.iter().map(|v| (v - x_mean).powi(2)).sum::<f64>() / n).sqrt();
    let span = bounds.hi - bounds.lo;
    let t: Vec<f64> = y.iter().map(|v| ((v - bounds.lo) / span).clamp(0.0, 1.0)).collect();

    let mut r = rng::substream(cfg.seed, "mlp-init");
    let mut uniform = |fan_in: usize, len: usize| -> Vec<f64> {
        let lim = (6.0 / fan_in as f64).sqrt();
        (0..len).map(|_| r.random_range(-lim..lim)).collect()
    };
    let mut p = MlpParams {
        x_mean,
        x_std,
        w1: uniform(1, h),
        b1: vec![0.01; h],
        w2: uniform(h, h * h),
        b2: vec![0.01; h],
        w3: uniform(h, h),
        b3: 0.0,
    };

    let mut theta = flatten(&p);
    let (mut m, mut v) = (vec![0.0; theta.len()], vec![0.0; theta.len()]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for epoch in 1..=cfg.epochs {
        let mut g = vec![0.0; theta.len()];
        let mut loss = 0.0;
        for (&xi, &ti) in x.iter().zip(&t) {
            let (out, tr) = mlp_forward(&p, xi);
            loss += (out - ti).powi(2);
            mlp_backward(&p, &tr, ti, &mut g);
        }
        if !loss.is_finite() {
            return Err(Error::Fit(format!("mlp loss diverged at epoch {epoch}")));
        }
        let (c1, c2) = (1.0 - b1.powi(epoch as i32), 1.0 - b2.powi(epoch as i32));
        for k in 0..theta.len() {
            let gk = g[k] / n;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            theta[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
        unflatten(&mut p, &theta);
    }
    let mut mapping = DistanceMapping::new(MappingParams::Mlp(p), bounds, 0.0, x.len());
    mapping.fit_mse = x.iter().zip(y).map(|(&xi, &yi)| (yi - mapping.raw(xi)).powi(2)).sum::<f64>() / n;
    if !mapping.fit_mse.is_finite() {
        return Err(Error::Fit("mlp produced non-finite outputs".into()));
    }
    Ok(mapping)
}
