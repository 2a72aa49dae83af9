//! Codec round trips (encode then decode) with delay compensation.
//!
//! A [`Transcoder`] produces the raw decoded waveform, which may carry codec
//! priming delay and tail padding. [`encode_decode`] then aligns it back onto
//! the input: the per-codec calibrated delay is refined by cross-correlation
//! inside a small window and the result is trimmed or zero-padded to the input
//! length.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Codec;
use crate::audio::{self, AudioBuffer, Clip};
use crate::error::{Error, Result};
use crate::rng;

pub trait Transcoder: Send + Sync {
    /// Identifier echoed into provenance records.
    fn version(&self) -> String;

    /// Calibrated decoder delay in samples for `codec`.
    fn nominal_delay(&self, codec: Codec) -> i64;

    /// Encodes and decodes `clip`, returning the decoded samples at the
    /// clip's sample rate without any alignment applied.
    fn round_trip(&self, clip: &Clip, codec: Codec, bitrate_kbps: u32) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    /// Half-width in samples of the cross-correlation refinement window.
    pub refine_window: i64,
    /// Largest delay accepted before the clip is rejected.
    pub max_delay: i64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            refine_window: 64,
            max_delay: 4096,
        }
    }
}

/// Lag (in samples) at which `decoded` best matches `reference`, searched in
/// `[center - window, center + window]`.
pub fn find_lag(reference: &[f32], decoded: &[f32], center: i64, window: i64) -> i64 {
    let mut best = (center, f64::NEG_INFINITY);
    for lag in (center - window)..=(center + window) {
        let mut acc = 0.0f64;
        for (t, &r) in reference.iter().enumerate() {
            let j = t as i64 + lag;
            if j >= 0 && (j as usize) < decoded.len() {
                acc += f64::from(r) * f64::from(decoded[j as usize]);
            }
        }
        if acc > best.1 {
            best = (lag, acc);
        }
    }
    best.0
}

/// Shifts `decoded` left by `lag` and fits it to `len` samples.
pub fn apply_lag(decoded: &[f32], lag: i64, len: usize) -> Vec<f32> {
    (0..len)
        .map(|t| {
            let j = t as i64 + lag;
            if j >= 0 && (j as usize) < decoded.len() {
                decoded[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

pub fn encode_decode(
    transcoder: &dyn Transcoder,
    clip: &Clip,
    codec: Codec,
    bitrate_kbps: u32,
    align: &AlignConfig,
) -> Result<Clip> {
    if codec == Codec::None {
        return Err(Error::Precondition("encode_decode needs a real codec".into()));
    }
    if bitrate_kbps == 0 {
        return Err(Error::Precondition("bitrate must be positive".into()));
    }
    let raw = transcoder.round_trip(clip, codec, bitrate_kbps)?;
    let center = transcoder.nominal_delay(codec);
    let lag = find_lag(&clip.samples, &raw, center, align.refine_window);
    if lag.abs() > align.max_delay {
        return Err(Error::Alignment {
            clip: format!("{}@{:.3}s", clip.source_id, clip.offset),
            message: format!("detected delay {lag} exceeds bound {}", align.max_delay),
        });
    }
    Ok(Clip {
        samples: apply_lag(&raw, lag, clip.len()),
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
        offset: clip.offset,
    })
}

/// Measures a codec's delay with a full cross-correlation search over
/// `[0, max_delay]` on a deterministic noise probe.
pub fn calibrate_delay(
    transcoder: &dyn Transcoder,
    codec: Codec,
    bitrate_kbps: u32,
    sample_rate: u32,
    max_delay: i64,
) -> Result<i64> {
    let mut r = rng::substream(0, "calibration-probe");
    let n = sample_rate as usize;
    let probe: Vec<f32> = (0..n)
        .map(|_| 0.25 * r.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0) as f32)
        .collect();
    let clip = Clip::new(probe, sample_rate).with_source("calibration", 0.0);
    let raw = transcoder.round_trip(&clip, codec, bitrate_kbps)?;
    let half = max_delay / 2;
    Ok(find_lag(&clip.samples, &raw, half, max_delay - half))
}

/// Deterministic in-process stand-in for a codec: adds codec-flavoured noise
/// at an SNR of `bitrate_kbps / 2` dB, optionally behind a simulated priming
/// delay. Lets the whole pipeline run without licensed encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTranscoder {
    pub seed: u64,
    pub delay_samples: usize,
    pub db_per_kbps: f64,
}

impl Default for ToyTranscoder {
    fn default() -> Self {
        Self {
            seed: 0,
            delay_samples: 0,
            db_per_kbps: 0.5,
        }
    }
}

impl ToyTranscoder {
    pub fn snr_db(&self, bitrate_kbps: u32) -> f64 {
        f64::from(bitrate_kbps) * self.db_per_kbps
    }

    /// The degraded clip before delay simulation.
    pub fn degrade(&self, clip: &Clip, codec: Codec, bitrate_kbps: u32) -> Vec<f32> {
        let n = clip.len();
        let mut r = rng::substream_path(
            self.seed,
            &[
                "toy-codec",
                &clip.source_id,
                &clip.offset.to_bits().to_string(),
                codec.as_str(),
                &bitrate_kbps.to_string(),
            ],
        );
        let white: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        // ~40 ms on/off gating for the burst flavours
        let period = ((f64::from(clip.sample_rate) * 0.04) as usize).max(1);
        let gate = |t: usize| if (t / period).is_multiple_of(2) { 1.0 } else { 0.0 };
        let noise: Vec<f64> = match codec {
            Codec::Opus => white.iter().enumerate().map(|(t, w)| w * gate(t)).collect(),
            Codec::Aac => {
                let mut y = 0.0;
                white
                    .iter()
                    .map(|w| {
                        y = 0.8 * y + 0.2 * w;
                        y
                    })
                    .collect()
            }
            Codec::Mp3 => (0..n)
                .map(|t| {
                    let prev = if t > 0 { white[t - 1] } else { 0.0 };
                    (white[t] - prev) * gate(t + period / 2)
                })
                .collect(),
            Codec::None => vec![0.0; n],
        };
        let sig: f64 = clip.samples.iter().map(|&s| f64::from(s).powi(2)).sum();
        let nrg: f64 = noise.iter().map(|v| v * v).sum();
        let gain = if sig > 0.0 && nrg > 0.0 {
            (sig / 10f64.powf(self.snr_db(bitrate_kbps) / 10.0) / nrg).sqrt()
        } else {
            0.0
        };
        clip.samples
            .iter()
            .zip(&noise)
            .map(|(&s, v)| (f64::from(s) + gain * v) as f32)
            .collect()
    }
}

impl Transcoder for ToyTranscoder {
    fn version(&self) -> String {
        format!(
            "toy-transcoder(seed={},delay={},db_per_kbps={})",
            self.seed, self.delay_samples, self.db_per_kbps
        )
    }

    fn nominal_delay(&self, _codec: Codec) -> i64 {
        self.delay_samples as i64
    }

    fn round_trip(&self, clip: &Clip, codec: Codec, bitrate_kbps: u32) -> Result<Vec<f32>> {
        let degraded = self.degrade(clip, codec, bitrate_kbps);
        let mut out = vec![0.0f32; self.delay_samples];
        out.extend(degraded);
        // decoders typically pad the tail to a whole frame
        out.extend(std::iter::repeat_n(0.0, 17));
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecArgs {
    /// Substituted for `{encoder}` (e.g. `libopus`).
    pub encoder: String,
    /// File extension of the encoded stream.
    pub extension: String,
    #[serde(default)]
    pub delay_samples: i64,
}

/// Runs an external encoder/decoder through argument templates.
///
/// Placeholders: `{input}`, `{encoded}`, `{output}`, `{codec}`, `{encoder}`,
/// `{bitrate}`, `{rate}`. Arguments of the form `${VAR}` are taken from the
/// environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalTranscoder {
    pub encode: Vec<String>,
    pub decode: Vec<String>,
    pub codecs: BTreeMap<String, CodecArgs>,
    #[serde(default)]
    pub version: String,
}

fn expand_env(arg: &str) -> String {
    if let Some(var) = arg.strip_prefix("${").and_then(|a| a.strip_suffix('}')) {
        std::env::var(var).unwrap_or_default()
    } else {
        arg.to_string()
    }
}

pub(crate) fn run_command(argv: &[String]) -> Result<String> {
    let (prog, args) = argv
        .split_first()
        .ok_or_else(|| Error::Config("empty command template".into()))?;
    let shown = argv.join(" ");
    let out = Command::new(prog)
        .args(args)
        .output()
        .map_err(|e| Error::ExternalTool {
            command: shown.clone(),
            diagnostics: e.to_string(),
        })?;
    if !out.status.success() {
        return Err(Error::ExternalTool {
            command: shown,
            diagnostics: format!(
                "{}: {}{}",
                out.status,
                String::from_utf8_lossy(&out.stderr),
                String::from_utf8_lossy(&out.stdout)
            ),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

impl ExternalTranscoder {
    fn args(&self, codec: Codec) -> Result<&CodecArgs> {
        self.codecs
            .get(codec.as_str())
            .ok_or_else(|| Error::Config(format!("no transcoder arguments for codec {codec}")))
    }

    fn fill(template: &[String], vars: &[(&str, String)]) -> Vec<String> {
        template
            .iter()
            .map(|a| {
                let mut s = expand_env(a);
                for (k, v) in vars {
                    s = s.replace(&format!("{{{k}}}"), v);
                }
                s
            })
            .collect()
    }

    fn run_in(&self, dir: &Path, clip: &Clip, codec: Codec, bitrate_kbps: u32) -> Result<Vec<f32>> {
        let args = self.args(codec)?;
        let input = dir.join("input.wav");
        let encoded = dir.join(format!("encoded.{}", args.extension));
        let output = dir.join("decoded.wav");
        audio::write_clip(&input, clip)?;
        let vars = [
            ("input", input.display().to_string()),
            ("encoded", encoded.display().to_string()),
            ("output", output.display().to_string()),
            ("codec", codec.as_str().to_string()),
            ("encoder", args.encoder.clone()),
            ("bitrate", bitrate_kbps.to_string()),
            ("rate", clip.sample_rate.to_string()),
        ];
        run_command(&Self::fill(&self.encode, &vars))?;
        run_command(&Self::fill(&self.decode, &vars))?;
        let decoded = audio::read_wav(&output)?;
        if decoded.sample_rate != clip.sample_rate {
            return Err(Error::ExternalTool {
                command: self.decode.join(" "),
                diagnostics: format!(
                    "decoded at {} Hz, expected {} Hz",
                    decoded.sample_rate, clip.sample_rate
                ),
            });
        }
        Ok(decoded.downmix())
    }
}

impl Transcoder for ExternalTranscoder {
    fn version(&self) -> String {
        if self.version.is_empty() {
            format!("external({})", self.encode.first().map_or("", |s| s.as_str()))
        } else {
            self.version.clone()
        }
    }

    fn nominal_delay(&self, codec: Codec) -> i64 {
        self.args(codec).map_or(0, |a| a.delay_samples)
    }

    fn round_trip(&self, clip: &Clip, codec: Codec, bitrate_kbps: u32) -> Result<Vec<f32>> {
        let dir = tempdir()?;
        let res = self.run_in(&dir, clip, codec, bitrate_kbps);
        let _ = std::fs::remove_dir_all(&dir);
        res
    }
}

fn tempdir() -> Result<std::path::PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let dir = std::env::temp_dir().join(format!(
        "aqlearn-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub(crate) fn scratch_dir() -> Result<std::path::PathBuf> {
    tempdir()
}

/// Channel-wise [`encode_decode`] for stereo material.
pub fn encode_decode_buffer(
    transcoder: &dyn Transcoder,
    buf: &AudioBuffer,
    codec: Codec,
    bitrate_kbps: u32,
    align: &AlignConfig,
) -> Result<AudioBuffer> {
    let channels = buf
        .channels
        .iter()
        .map(|ch| {
            encode_decode(
                transcoder,
                &Clip::new(ch.clone(), buf.sample_rate),
                codec,
                bitrate_kbps,
                align,
            )
            .map(|c| c.samples)
        })
        .collect::<Result<_>>()?;
    Ok(AudioBuffer {
        channels,
        sample_rate: buf.sample_rate,
    })
}
