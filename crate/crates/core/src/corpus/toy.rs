//! Deterministic synthetic source recordings: sequences of harmonic notes
//! with a slow amplitude envelope. Paired with [`super::ToyTranscoder`] this
//! gives a complete corpus without licensed music or codecs.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySourceConfig {
    pub num_sources: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    /// Seconds per note.
    pub note_seconds: f64,
    /// Every n-th source is written as stereo (0 disables).
    pub stereo_every: usize,
}

impl Default for ToySourceConfig {
    fn default() -> Self {
        Self {
            num_sources: 16,
            seconds: 2.0,
            sample_rate: 16_000,
            note_seconds: 0.25,
            stereo_every: 3,
        }
    }
}

pub fn synthesize(cfg: &ToySourceConfig, index: usize, seed: u64) -> AudioBuffer {
    let mut r = rng::substream_path(seed, &["toy-source", &index.to_string()]);
    let rate = f64::from(cfg.sample_rate);
    let n = (cfg.seconds * rate).round() as usize;
    let note_len = ((cfg.note_seconds * rate).round() as usize).max(1);
    let nyq = rate / 2.0;
    let stereo = cfg.stereo_every > 0 && index % cfg.stereo_every == cfg.stereo_every - 1;

    let mut left = vec![0.0f32; n];
    let mut right = vec![0.0f32; n];
    let mut phase = [0.0f64; 4];
    let mut start = 0;
    while start < n {
        let end = (start + note_len).min(n);
        let f0 = 110.0 * 2f64.powf(r.random_range(0.0..4.0));
        let partials: Vec<(f64, f64)> = (1..=4)
            .map(|h| (f0 * h as f64, r.random_range(0.2..1.0) / h as f64))
            .collect();
        let pan: f64 = r.random_range(0.3..0.7);
        let am_rate: f64 = r.random_range(1.0..6.0);
        for t in start..end {
            let local = (t - start) as f64 / rate;
            let env = (1.0 - (-local * 60.0).exp()) * (0.6 + 0.4 * (2.0 * std::f64::consts::PI * am_rate * t as f64 / rate).cos());
            let mut s = 0.0;
            for (k, &(f, a)) in partials.iter().enumerate() {
                if f < nyq * 0.9 {
                    phase[k] += 2.0 * std::f64::consts::PI * f / rate;
                    s += a * phase[k].sin();
                }
            }
            let v = 0.2 * env * s;
            left[t] = (v * (1.0 - pan) * 2.0) as f32;
            right[t] = (v * pan * 2.0) as f32;
        }
        start = end;
    }
    if stereo {
        AudioBuffer {
            channels: vec![left, right],
            sample_rate: cfg.sample_rate,
        }
    } else {
        let mono = left.iter().zip(&right).map(|(a, b)| 0.5 * (a + b)).collect();
        AudioBuffer::mono(mono, cfg.sample_rate)
    }
}

/// Writes `toy_NNN.wav` files into `dir`; returns their paths in order.
pub fn write_sources(dir: &Path, cfg: &ToySourceConfig, seed: u64) -> Result<Vec<PathBuf>> {
    (0..cfg.num_sources)
        .map(|i| {
            let p = dir.join(format!("toy_{i:03}.wav"));
            audio::write_wav(&p, &synthesize(cfg, i, seed))?;
            Ok(p)
        })
        .collect()
}
