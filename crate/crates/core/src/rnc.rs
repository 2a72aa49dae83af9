//! Rank-n-Contrast loss over embedding distances, with one label view for
//! the surrogate MOS and one per codec for bitrates.
//!
//! For an anchor `i` in a view's pool `P`, with `a_k = sign · d(i, k) / τ`:
//!
//! ```text
//! L_i = -1/(|P|-1) · Σ_{j∈P, j≠i} [ a_j - log Σ_{k∈S_ij} exp(a_k) ]
//! S_ij = { k ∈ P, k ≠ i : |y_i - y_k| ≥ |y_i - y_j| }
//! ```
//!
//! Sorting the other pool members by label distance (descending) turns every
//! `S_ij` into a prefix ending at the tie group of `j`, so each anchor costs a
//! sort plus one cumulative log-sum-exp pass.

use serde::{Deserialize, Serialize};

use crate::corpus::Codec;
use crate::encoder::euclidean;
use crate::error::{Error, Result};
use crate::surrogate::{label_distance, ExtendedReal, SurrogateLabel};

/// Which items a codec view ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecPool {
    /// Clean items plus items coded with the view's codec.
    CleanAndCodec,
    /// Every item in the batch.
    WholeBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RncConfig {
    pub temperature: f64,
    /// Exponent sign applied to distances; `-1` rewards closeness of similar labels.
    pub sign: f64,
    /// Adds the per-codec bitrate term to the surrogate-MOS term.
    pub bitrate_term: bool,
    pub codec_pool: CodecPool,
}

impl Default for RncConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            sign: -1.0,
            bitrate_term: true,
            codec_pool: CodecPool::CleanAndCodec,
        }
    }
}

impl RncConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::Config("sign must be -1 or +1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelView {
    Mos,
    Codec(Codec),
}

impl LabelView {
    pub fn label(self, l: &SurrogateLabel) -> ExtendedReal {
        match self {
            LabelView::Mos => ExtendedReal::Finite(l.visqol_mos),
            LabelView::Codec(_) => l.bitrate,
        }
    }

    /// Indices ranked under this view.
    pub fn pool(self, labels: &[SurrogateLabel], rule: CodecPool) -> Vec<usize> {
        match self {
            LabelView::Mos => (0..labels.len()).collect(),
            LabelView::Codec(c) => (0..labels.len())
                .filter(|&k| rule == CodecPool::WholeBatch || labels[k].is_clean() || labels[k].codec == c)
                .collect(),
        }
    }
}

/// `S_ij` over `pool`, by direct enumeration.
pub fn candidate_set(i: usize, j: usize, labels: &[ExtendedReal], pool: &[usize]) -> Vec<usize> {
    let dij = label_distance(labels[i], labels[j]);
    pool.iter()
        .copied()
        .filter(|&k| k != i && label_distance(labels[i], labels[k]) >= dij)
        .collect()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Loss of anchor `i` and `∂L_i/∂d(i, k)` for each `k` in `pool` (zero for `k = i`).
/// `dist[k]` is `d(i, k)`. Returns `None` for a degenerate pool of one.
pub fn per_sample(i: usize, labels: &[ExtendedReal], pool: &[usize], dist: &[f64], cfg: &RncConfig) -> Option<(f64, Vec<f64>)> {
    let others: Vec<usize> = pool.iter().copied().filter(|&k| k != i).collect();
    let m1 = others.len();
    if m1 == 0 {
        return None;
    }
    let scale = cfg.sign / cfg.temperature;
    let mut order: Vec<(ExtendedReal, usize)> = others
        .iter()
        .map(|&k| (label_distance(labels[i], labels[k]), k))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    // Tie groups in descending label distance, with cumulative log-sum-exp.
    let mut groups: Vec<(usize, usize, f64)> = Vec::new();
    let mut lse = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && order[end].0 == order[start].0 {
            lse = log_add_exp(lse, scale * dist[order[end].1]);
            end += 1;
        }
        groups.push((start, end, lse));
        start = end;
    }

    let mut loss = 0.0;
    let mut grad_a = vec![0.0; dist.len()];
    for (g, &(s, e, lse_g)) in groups.iter().enumerate() {
        for &(_, j) in &order[s..e] {
            loss -= scale * dist[j] - lse_g;
        }
        // Every member of group `g` is in the candidate sets of groups `g..`.
        for &(_, k) in &order[s..e] {
            let a_k = scale * dist[k];
            let mut mass = 0.0;
            for &(s2, e2, lse2) in &groups[g..] {
                mass += (e2 - s2) as f64 * (a_k - lse2).exp();
            }
            grad_a[k] = -(1.0 - mass);
        }
    }
    let norm = m1 as f64;
    let grad_d = grad_a.iter().map(|g| g * scale / norm).collect();
    Some((loss / norm, grad_d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RncOutput {
    pub loss: f64,
    /// `∂loss/∂embedding` per item.
    pub grad: Vec<Vec<f64>>,
    /// Anchors skipped because their pool held only themselves.
    pub degenerate: usize,
}

fn distance_matrix(emb: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = emb.len();
    let mut d = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let v = euclidean(&emb[a], &emb[b]);
            d[a][b] = v;
            d[b][a] = v;
        }
    }
    d
}

/// Batch loss: `(1/N) · [Σ_i L^mos(i) + Σ_{coded i} L^{codec(i)}(i)]`, with gradient.
pub fn rnc_batch(labels: &[SurrogateLabel], emb: &[Vec<f64>], cfg: &RncConfig) -> Result<RncOutput> {
    cfg.check()?;
    let n = labels.len();
    if n < 2 {
        return Err(Error::Validation(format!("batch of {n} items; need at least 2")));
    }
    if emb.len() != n {
        return Err(Error::Validation(format!("{} embeddings for {n} labels", emb.len())));
    }
    let dim = emb[0].len();
    if emb.iter().any(|e| e.len() != dim) {
        return Err(Error::Validation("embeddings differ in length".into()));
    }
    let dist = distance_matrix(emb);
    let mut loss = 0.0;
    let mut grad_d = vec![vec![0.0; n]; n];
    let mut degenerate = 0;

    let mut run = |i: usize, view: LabelView, loss: &mut f64, degenerate: &mut usize| {
        let ys: Vec<ExtendedReal> = labels.iter().map(|l| view.label(l)).collect();
        let pool = view.pool(labels, cfg.codec_pool);
        match per_sample(i, &ys, &pool, &dist[i], cfg) {
            Some((l, g)) => {
                *loss += l;
                for (k, gk) in g.into_iter().enumerate() {
                    grad_d[i][k] += gk;
                }
            }
            None => *degenerate += 1,
        }
    };
    for (i, l) in labels.iter().enumerate() {
        run(i, LabelView::Mos, &mut loss, &mut degenerate);
        if cfg.bitrate_term && !l.is_clean() {
            run(i, LabelView::Codec(l.codec), &mut loss, &mut degenerate);
        }
    }
    if degenerate > 0 {
        log::debug!("{degenerate} anchors had a single-item pool and contribute 0");
    }

    let inv_n = 1.0 / n as f64;
    let mut grad = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for k in 0..n {
            let g = grad_d[i][k] * inv_n;
            if g == 0.0 || dist[i][k] == 0.0 {
                continue;
            }
            let c = g / dist[i][k];
            for t in 0..dim {
                let diff = c * (emb[i][t] - emb[k][t]);
                grad[i][t] += diff;
                grad[k][t] -= diff;
            }
        }
    }
    Ok(RncOutput {
        loss: loss * inv_n,
        grad,
        degenerate,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Nested-loop evaluation straight from the set definition.
    use super::*;

    pub fn per_sample(i: usize, ys: &[ExtendedReal], pool: &[usize], emb: &[Vec<f64>], cfg: &RncConfig) -> f64 {
        let others: Vec<usize> = pool.iter().copied().filter(|&k| k != i).collect();
        if others.is_empty() {
            return 0.0;
        }
        let sim = |k: usize| (cfg.sign * euclidean(&emb[i], &emb[k]) / cfg.temperature).exp();
        let mut total = 0.0;
        for &j in &others {
            let s = candidate_set(i, j, ys, pool);
            let den: f64 = s.iter().map(|&k| sim(k)).sum();
            total += (sim(j) / den).ln();
        }
        -total / others.len() as f64
    }

    pub fn batch(labels: &[SurrogateLabel], emb: &[Vec<f64>], cfg: &RncConfig) -> f64 {
        let mut total = 0.0;
        for (i, l) in labels.iter().enumerate() {
            let views = if cfg.bitrate_term && !l.is_clean() {
                vec![LabelView::Mos, LabelView::Codec(l.codec)]
            } else {
                vec![LabelView::Mos]
            };
            for v in views {
                let ys: Vec<ExtendedReal> = labels.iter().map(|x| v.label(x)).collect();
                total += per_sample(i, &ys, &v.pool(labels, cfg.codec_pool), emb, cfg);
            }
        }
        total / labels.len() as f64
    }
}
