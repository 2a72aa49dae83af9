use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{self, Clip};
use crate::corpus::resample;
use crate::corpus::transcode::{run_command, scratch_dir};
use crate::error::{Error, Result};

/// An objective full-reference quality tool returning a MOS-like score.
pub trait Labeler: Send + Sync {
    fn version(&self) -> String;

    /// Raw tool output for `degraded` against `reference`, before range checks.
    fn raw_mos(&self, degraded: &Clip, reference: &Clip) -> Result<f64>;
}

/// Labels `degraded` against its time-aligned `reference`. Scores outside
/// [0, 6] indicate a misconfigured tool; anything else is clamped to [1, 5].
pub fn label_with_visqol(labeler: &dyn Labeler, degraded: &Clip, reference: &Clip) -> Result<f64> {
    if degraded.sample_rate != reference.sample_rate || degraded.len() != reference.len() {
        return Err(Error::Precondition(format!(
            "degraded ({} samples @ {} Hz) and reference ({} @ {} Hz) are not aligned",
            degraded.len(),
            degraded.sample_rate,
            reference.len(),
            reference.sample_rate
        )));
    }
    let mos = labeler.raw_mos(degraded, reference)?;
    if !(0.0..=6.0).contains(&mos) {
        return Err(Error::Labeling(format!(
            "{} returned {mos}, outside the sane range [0, 6]",
            labeler.version()
        )));
    }
    Ok(mos.clamp(1.0, 5.0))
}

/// Deterministic test double: MOS falls linearly with degradation
/// intensity, where intensity is the measured SNR placed between
/// `ceiling_db` (intensity 0) and `floor_db` (intensity 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubLabeler {
    pub ceiling_db: f64,
    pub floor_db: f64,
}

impl Default for StubLabeler {
    fn default() -> Self {
        Self {
            ceiling_db: 48.0,
            floor_db: 8.0,
        }
    }
}

impl StubLabeler {
    pub fn intensity(&self, degraded: &Clip, reference: &Clip) -> f64 {
        let sig: f64 = reference.samples.iter().map(|&s| f64::from(s).powi(2)).sum();
        let err: f64 = degraded
            .samples
            .iter()
            .zip(&reference.samples)
            .map(|(&d, &r)| (f64::from(d) - f64::from(r)).powi(2))
            .sum();
        if err == 0.0 {
            return 0.0;
        }
        if sig == 0.0 {
            return 1.0;
        }
        let snr = 10.0 * (sig / err).log10();
        ((self.ceiling_db - snr) / (self.ceiling_db - self.floor_db)).clamp(0.0, 1.0)
    }
}

impl Labeler for StubLabeler {
    fn version(&self) -> String {
        format!("stub-snr({},{})", self.ceiling_db, self.floor_db)
    }

    fn raw_mos(&self, degraded: &Clip, reference: &Clip) -> Result<f64> {
        Ok(5.0 - 4.0 * self.intensity(degraded, reference))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisqolMode {
    Audio,
    Speech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessLabelerConfig {
    /// Argument template with `{reference}` and `{degraded}` placeholders.
    pub command: Vec<String>,
    /// Regex with one capture group around the score in the tool's stdout.
    pub mos_pattern: String,
    pub mode: VisqolMode,
    /// Appended to the command in speech mode.
    pub speech_args: Vec<String>,
    /// Both signals are resampled to this rate before invocation.
    pub sample_rate: u32,
    pub version: String,
}

impl Default for ProcessLabelerConfig {
    fn default() -> Self {
        Self {
            command: ["visqol", "--reference_file", "{reference}", "--degraded_file", "{degraded}"]
                .map(String::from)
                .to_vec(),
            mos_pattern: r"MOS-LQO:\s*([0-9.eE+-]+)".into(),
            mode: VisqolMode::Audio,
            speech_args: vec!["--use_speech_mode".into()],
            sample_rate: 48_000,
            version: "visqol-v3".into(),
        }
    }
}

pub struct ProcessLabeler {
    cfg: ProcessLabelerConfig,
    pattern: Regex,
    invocations: AtomicUsize,
}

impl ProcessLabeler {
    pub fn new(cfg: ProcessLabelerConfig) -> Result<Self> {
        let pattern = Regex::new(&cfg.mos_pattern)
            .map_err(|e| Error::Config(format!("bad mos_pattern: {e}")))?;
        if pattern.captures_len() < 2 {
            return Err(Error::Config("mos_pattern needs a capture group".into()));
        }
        Ok(Self {
            cfg,
            pattern,
            invocations: AtomicUsize::new(0),
        })
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    fn invoke(&self, dir: &std::path::Path, degraded: &Clip, reference: &Clip) -> Result<f64> {
        let ref_path = dir.join("reference.wav");
        let deg_path = dir.join("degraded.wav");
        let rate = self.cfg.sample_rate;
        let write = |clip: &Clip, p: &PathBuf| -> Result<()> {
            let c = resample::resample(clip, rate)?.clip;
            audio::write_wav_i16(p, &audio::AudioBuffer::mono(c.samples, rate))
        };
        write(reference, &ref_path)?;
        write(degraded, &deg_path)?;
        let mut argv: Vec<String> = self
            .cfg
            .command
            .iter()
            .map(|a| {
                a.replace("{reference}", &ref_path.display().to_string())
                    .replace("{degraded}", &deg_path.display().to_string())
            })
            .collect();
        if self.cfg.mode == VisqolMode::Speech {
            argv.extend(self.cfg.speech_args.iter().cloned());
        }
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let stdout = run_command(&argv)?;
        let caps = self.pattern.captures(&stdout).ok_or_else(|| {
            Error::Labeling(format!("no score matching `{}` in output: {stdout}", self.cfg.mos_pattern))
        })?;
        caps[1]
            .parse::<f64>()
            .map_err(|e| Error::Labeling(format!("unparsable score `{}`: {e}", &caps[1])))
    }
}

impl Labeler for ProcessLabeler {
    fn version(&self) -> String {
        format!("{}:{:?}@{}", self.cfg.version, self.cfg.mode, self.cfg.sample_rate)
    }

    fn raw_mos(&self, degraded: &Clip, reference: &Clip) -> Result<f64> {
        let dir = scratch_dir()?;
        let res = self.invoke(&dir, degraded, reference);
        let _ = std::fs::remove_dir_all(&dir);
        res
    }
}

/// Content-addressed label store: memory first, then an optional directory.
#[derive(Default)]
pub struct LabelCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, f64>>,
}

impl LabelCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            mem: Mutex::default(),
        }
    }

    pub fn key(degraded: &Clip, reference: &Clip, tool_version: &str) -> String {
        let mut h = Sha256::new();
        for c in [degraded, reference] {
            h.update(c.sample_rate.to_le_bytes());
            h.update((c.samples.len() as u64).to_le_bytes());
            for s in &c.samples {
                h.update(s.to_le_bytes());
            }
        }
        h.update(tool_version.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        if let Some(v) = self.mem.lock().unwrap().get(key) {
            return Some(*v);
        }
        let text = std::fs::read_to_string(self.path(key)?).ok()?;
        let v: f64 = serde_json::from_str(&text).ok()?;
        self.mem.lock().unwrap().insert(key.to_string(), v);
        Some(v)
    }

    pub fn put(&self, key: &str, mos: f64) -> Result<()> {
        self.mem.lock().unwrap().insert(key.to_string(), mos);
        if let Some(p) = self.path(key) {
            let dir = p.parent().expect("cache path has a parent");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(&p, serde_json::to_string(&mos)?).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Wraps a labeler with a [`LabelCache`]; byte-identical inputs hit the
/// external tool once.
pub struct CachedLabeler<L> {
    pub inner: L,
    pub cache: LabelCache,
    misses: AtomicUsize,
}

impl<L: Labeler> CachedLabeler<L> {
    pub fn new(inner: L, cache: LabelCache) -> Self {
        Self {
            inner,
            cache,
            misses: AtomicUsize::new(0),
        }
    }

    /// Number of calls forwarded to the wrapped labeler.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

impl<L: Labeler> Labeler for CachedLabeler<L> {
    fn version(&self) -> String {
        self.inner.version()
    }

    fn raw_mos(&self, degraded: &Clip, reference: &Clip) -> Result<f64> {
        let key = LabelCache::key(degraded, reference, &self.inner.version());
        if let Some(v) = self.cache.get(&key) {
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.raw_mos(degraded, reference)?;
        self.cache.put(&key, v)?;
        Ok(v)
    }
}

impl Labeler for Box<dyn Labeler> {
    fn version(&self) -> String {
        self.as_ref().version()
    }

    fn raw_mos(&self, degraded: &Clip, reference: &Clip) -> Result<f64> {
        self.as_ref().raw_mos(degraded, reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Codec, ToyTranscoder};

    fn tone() -> Clip {
        Clip::new((0..4000).map(|i| 0.3 * (i as f32 * 0.07).sin()).collect(), 8000)
            .with_source("s", 0.0)
    }

    #[test]
    fn stub_self_comparison_is_top_of_scale() {
        let c = tone();
        assert_eq!(label_with_visqol(&StubLabeler::default(), &c, &c).unwrap(), 5.0);
    }

    #[test]
    fn stub_is_linear_and_monotone_in_toy_intensity() {
        // the toy transcoder sets SNR = kbps / 2 dB exactly, so the stub
        // recovers intensity = (48 - kbps/2) / 40
        let t = ToyTranscoder::default();
        let stub = StubLabeler::default();
        let c = tone();
        let mut prev = f64::NEG_INFINITY;
        for kbps in [16, 32, 48, 64, 80] {
            let d = Clip::new(t.degrade(&c, Codec::Opus, kbps), 8000);
            let mos = label_with_visqol(&stub, &d, &c).unwrap();
            let intensity = (48.0 - f64::from(kbps) / 2.0) / 40.0;
            assert!((mos - (5.0 - 4.0 * intensity)).abs() < 1e-4, "{kbps}: {mos}");
            assert!(mos > prev);
            prev = mos;
        }
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let c = tone();
        let short = Clip::new(c.samples[..100].to_vec(), 8000);
        assert!(label_with_visqol(&StubLabeler::default(), &short, &c).is_err());
    }

    fn echo_labeler(out: &str) -> ProcessLabeler {
        ProcessLabeler::new(ProcessLabelerConfig {
            command: vec![
                "sh".into(),
                "-c".into(),
                format!("test -f \"$0\" && test -f \"$1\" && echo 'MOS-LQO: {out}'"),
                "{reference}".into(),
                "{degraded}".into(),
            ],
            sample_rate: 16_000,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn process_labeler_parses_stdout() {
        let c = tone();
        let l = echo_labeler("4.25");
        assert_eq!(label_with_visqol(&l, &c, &c).unwrap(), 4.25);
        assert_eq!(l.invocations(), 1);
    }

    #[test]
    fn out_of_range_score_is_sanity_error() {
        let c = tone();
        let err = label_with_visqol(&echo_labeler("7.5"), &c, &c).unwrap_err();
        assert!(matches!(err, Error::Labeling(_)));
        // in [0, 6] but outside [1, 5] clamps
        assert_eq!(label_with_visqol(&echo_labeler("0.5"), &c, &c).unwrap(), 1.0);
    }

    #[test]
    fn missing_tool_is_external_error() {
        let l = ProcessLabeler::new(ProcessLabelerConfig {
            command: vec!["/nonexistent/visqol".into()],
            ..Default::default()
        })
        .unwrap();
        let c = tone();
        assert!(matches!(
            label_with_visqol(&l, &c, &c).unwrap_err(),
            Error::ExternalTool { .. }
        ));
    }

    #[test]
    fn cache_hits_skip_the_tool() {
        let dir = tempfile::tempdir().unwrap();
        let c = tone();
        let cached = CachedLabeler::new(echo_labeler("3.5"), LabelCache::on_disk(dir.path()));
        for _ in 0..3 {
            assert_eq!(label_with_visqol(&cached, &c, &c).unwrap(), 3.5);
        }
        assert_eq!(cached.inner.invocations(), 1);

        // a fresh process with the same store reads from disk
        let again = CachedLabeler::new(echo_labeler("3.5"), LabelCache::on_disk(dir.path()));
        label_with_visqol(&again, &c, &c).unwrap();
        assert_eq!(again.inner.invocations(), 0);
    }
}
