use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{build_manifest, ClipFiles, Manifest, SourceClips};
use super::transcode::{encode_decode, AlignConfig, Transcoder};
use super::{resample, segment, Codec, Split};
use crate::audio;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub clip_seconds: f64,
    pub target_rate: u32,
    pub ladder: Vec<u32>,
    pub codecs: Vec<Codec>,
    pub split_fractions: BTreeMap<Split, f64>,
    pub align: AlignConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clip_seconds: 4.0,
            target_rate: 24_000,
            ladder: vec![16, 32, 48, 64, 80, 96, 128],
            codecs: Codec::CODED.to_vec(),
            split_fractions: [(Split::Train, 0.8), (Split::Val, 0.1), (Split::Test, 0.1)]
                .into_iter()
                .collect(),
            align: AlignConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn check(&self) -> Result<()> {
        if self.codecs.contains(&Codec::None) {
            return Err(Error::Config("`none` is not a coding codec".into()));
        }
        if self.ladder.contains(&0) {
            return Err(Error::Config("ladder bitrates must be positive".into()));
        }
        if self.target_rate == 0 || !(self.clip_seconds > 0.0) {
            return Err(Error::Config("target_rate and clip_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Lists `*.wav` under `dir`, sorted by name.
pub fn list_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn rel(path: &str) -> String {
    path.replace('\\', "/")
}

/// Segments every source, writes clean and coded clips at the target rate
/// under `out_root/clips`, and returns the split manifest. Coding happens at
/// the source rate, resampling afterwards.
pub fn prepare_corpus(
    sources: &[PathBuf],
    out_root: &Path,
    cfg: &CorpusConfig,
    transcoder: &dyn Transcoder,
    seed: u64,
) -> Result<Manifest> {
    cfg.check()?;
    let mut jobs = Vec::new();
    for path in sources {
        let source_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("bad source name {}", path.display())))?
            .to_string();
        jobs.push((source_id, path.clone()));
    }

    let per_source: Vec<Result<SourceClips>> = jobs
        .par_iter()
        .map(|(source_id, path)| {
            let buf = audio::read_wav(path)?;
            let clips = segment(&buf, source_id, cfg.clip_seconds)?;
            if clips.is_empty() {
                log::warn!("{} is shorter than one clip; skipped", path.display());
            }
            let files = clips
                .par_iter()
                .enumerate()
                .map(|(index, clip)| {
                    let base = format!("clips/{source_id}/{index:04}");
                    let clean = rel(&format!("{base}/clean.wav"));
                    let clean_out = resample(clip, cfg.target_rate)?.clip;
                    audio::write_clip(&out_root.join(&clean), &clean_out)?;
                    let mut coded = BTreeMap::new();
                    for &codec in &cfg.codecs {
                        for &kbps in &cfg.ladder {
                            let deg = encode_decode(transcoder, clip, codec, kbps, &cfg.align)?;
                            let deg = resample(&deg, cfg.target_rate)?.clip;
                            let p = rel(&format!("{base}/{codec}_{kbps}.wav"));
                            audio::write_clip(&out_root.join(&p), &deg)?;
                            coded.insert((codec, kbps), p);
                        }
                    }
                    Ok(ClipFiles {
                        index,
                        offset_seconds: clip.offset,
                        clean,
                        coded,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SourceClips {
                source_id: source_id.clone(),
                clips: files,
            })
        })
        .collect();
    let per_source = per_source.into_iter().collect::<Result<Vec<_>>>()?;

    build_manifest(
        out_root,
        &per_source,
        &cfg.ladder,
        &cfg.codecs,
        &cfg.split_fractions,
        cfg.target_rate,
        cfg.clip_seconds,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::{write_sources, ToySourceConfig};
    use crate::corpus::ToyTranscoder;

    #[test]
    fn toy_prepare_produces_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let src_cfg = ToySourceConfig {
            num_sources: 4,
            seconds: 1.0,
            ..Default::default()
        };
        let sources = write_sources(&dir.path().join("src"), &src_cfg, 1).unwrap();
        let cfg = CorpusConfig {
            clip_seconds: 0.5,
            target_rate: 8000,
            ladder: vec![16, 48],
            codecs: vec![Codec::Opus, Codec::Aac],
            split_fractions: [(Split::Train, 0.5), (Split::Val, 0.5)].into_iter().collect(),
            align: AlignConfig::default(),
        };
        let t = ToyTranscoder {
            delay_samples: 100,
            ..Default::default()
        };
        let out = dir.path().join("corpus");
        let m = prepare_corpus(&sources, &out, &cfg, &t, 5).unwrap();
        m.validate(true).unwrap();
        // 4 sources x 2 clips x (1 clean + 4 coded)
        assert_eq!(m.records.len(), 40);
        let c = audio::read_clip(&m.resolve(&m.records[1].clip_path)).unwrap();
        assert_eq!(c.sample_rate, 8000);
        assert_eq!(c.len(), 4000);

        let again = prepare_corpus(&sources, &dir.path().join("corpus2"), &cfg, &t, 5).unwrap();
        assert_eq!(m.to_jsonl().unwrap(), again.to_jsonl().unwrap());
    }
}
