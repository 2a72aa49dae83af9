//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Gradients, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    /// One update of every parameter for which `decay` returns `Some`; the
    /// value is that parameter's weight-decay coefficient. Missing gradients
    /// count as zero.
    pub fn step(&mut self, model: &mut EncoderModel, grads: &Gradients, lr: f64, decay: &dyn Fn(&str) -> Option<f64>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, p| {
            let Some(wd) = decay(name) else { return };
            let g = grads.get(name);
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for idx in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[idx]);
                if wd != 0.0 {
                    p[idx] *= 1.0 - lr * wd;
                }
                m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
                v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
                let denom = (v[idx] / bc2).sqrt() + eps;
                p[idx] -= lr * (m[idx] / bc1) / denom;
            }
        });
    }
}
