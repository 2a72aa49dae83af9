//! Inference-time scoring: full-reference and non-matching-reference
//! embedding distances, distance-to-score mappings and the FAD baseline.

mod fad;
mod mapping;

pub use fad::{fad, GaussianStats};
pub use mapping::{fit_cubic, fit_mlp, DistanceMapping, MappingParams, MlpConfig, MlpParams, ScaleBounds};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, Clip};
use crate::corpus::resample::resample;
use crate::encoder::{euclidean, Embedding, EncoderModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    FullReference,
    NonMatching,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::FullReference => "full_reference",
            ScoreMode::NonMatching => "non_matching",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How distances to a non-matching reference set combine into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanDistance,
    CentroidDistance,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::MeanDistance => "mean_distance",
            Aggregation::CentroidDistance => "centroid_distance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub distance: f64,
    pub mapped_score: Option<f64>,
    pub mode: ScoreMode,
    /// Set for non-matching scores only.
    pub aggregation: Option<Aggregation>,
    /// Channels scored and averaged.
    pub channels: usize,
}

/// Each channel as a mono clip at the model rate.
pub fn channel_clips(audio: &AudioBuffer, rate: u32, label: &str) -> Result<Vec<Clip>> {
    if audio.channels.is_empty() {
        return Err(Error::Precondition(format!("{label}: no audio channels")));
    }
    audio
        .channels
        .iter()
        .map(|ch| {
            let clip = Clip::new(ch.clone(), audio.sample_rate).with_source(label, 0.0);
            Ok(resample(&clip, rate)?.clip)
        })
        .collect()
}

/// Inference embedding of every channel.
pub fn embed_channels(model: &EncoderModel, audio: &AudioBuffer, label: &str) -> Result<Vec<Embedding>> {
    channel_clips(audio, model.sample_rate(), label)?
        .iter()
        .map(|c| model.embed(c))
        .collect()
}

/// Distances between per-channel embeddings, averaged. A mono side is
/// compared against every channel of the other side.
pub fn channel_distance(test: &[Embedding], reference: &[Embedding]) -> Result<f64> {
    let pairs: Vec<(&Embedding, &Embedding)> = match (test.len(), reference.len()) {
        (0, _) | (_, 0) => return Err(Error::Precondition("no channels to compare".into())),
        (a, b) if a == b => test.iter().zip(reference).collect(),
        (1, _) => reference.iter().map(|r| (&test[0], r)).collect(),
        (_, 1) => test.iter().map(|t| (t, &reference[0])).collect(),
        (a, b) => {
            return Err(Error::Precondition(format!(
                "channel counts differ: test {a}, reference {b}"
            )))
        }
    };
    Ok(pairs.iter().map(|(t, r)| t.distance(r)).sum::<f64>() / pairs.len() as f64)
}

pub fn score_full_reference(
    model: &EncoderModel,
    test: &AudioBuffer,
    reference: &AudioBuffer,
    mapping: Option<&DistanceMapping>,
) -> Result<QualityScore> {
    if test.sample_rate != reference.sample_rate {
        return Err(Error::Precondition(format!(
            "test at {} Hz, reference at {} Hz",
            test.sample_rate, reference.sample_rate
        )));
    }
    // one backbone frame of slack, measured at the input rate
    let hop = model.backbone.cfg.hop_samples() as f64 * f64::from(test.sample_rate) / f64::from(model.sample_rate());
    let diff = test.num_frames().abs_diff(reference.num_frames());
    if diff as f64 > hop {
        return Err(Error::Precondition(format!(
            "duration mismatch of {diff} samples exceeds one frame ({hop:.0} samples)"
        )));
    }
    let t = embed_channels(model, test, "test")?;
    let r = embed_channels(model, reference, "reference")?;
    let distance = channel_distance(&t, &r)?;
    Ok(QualityScore {
        distance,
        mapped_score: mapping.map(|m| m.apply(distance)),
        mode: ScoreMode::FullReference,
        aggregation: None,
        channels: t.len().max(r.len()),
    })
}

/// Combines distances from `test` to a reference set.
pub fn nmr_distance(test: &[f64], references: &[Vec<f64>], aggregation: Aggregation) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Precondition("reference set is empty".into()));
    }
    if let Some(r) = references.iter().find(|r| r.len() != test.len()) {
        return Err(Error::Precondition(format!(
            "embedding dimension {} does not match reference dimension {}",
            test.len(),
            r.len()
        )));
    }
    let n = references.len() as f64;
    Ok(match aggregation {
        Aggregation::MeanDistance => references.iter().map(|r| euclidean(test, r)).sum::<f64>() / n,
        Aggregation::CentroidDistance => {
            let mut c = vec![0.0; test.len()];
            for r in references {
                c.iter_mut().zip(r).for_each(|(a, b)| *a += b / n);
            }
            euclidean(test, &c)
        }
    })
}

/// Embeddings of a fixed non-matching reference set; every channel of every
/// reference joins the set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub names: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ReferenceSet {
    pub fn embed(model: &EncoderModel, references: &[(String, AudioBuffer)]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Precondition("reference set is empty".into()));
        }
        let mut names = Vec::new();
        let mut embeddings = Vec::new();
        for (name, audio) in references {
            for (ch, e) in embed_channels(model, audio, name)?.into_iter().enumerate() {
                names.push(format!("{name}#{ch}"));
                embeddings.push(e.vector);
            }
        }
        Ok(Self { names, embeddings })
    }

    /// Reads a reference list file: one audio path per line, relative paths
    /// resolved against the list's directory, `#` comments and blank lines ignored.
    pub fn read_list(path: &Path) -> Result<Vec<std::path::PathBuf>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let paths: Vec<_> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect();
        if paths.is_empty() {
            return Err(Error::Precondition(format!("{}: reference list is empty", path.display())));
        }
        Ok(paths)
    }
}

pub fn score_non_matching(
    model: &EncoderModel,
    test: &AudioBuffer,
    references: &ReferenceSet,
    aggregation: Aggregation,
    mapping: Option<&DistanceMapping>,
) -> Result<QualityScore> {
    let t = embed_channels(model, test, "test")?;
    let per_channel = t
        .iter()
        .map(|e| nmr_distance(&e.vector, &references.embeddings, aggregation))
        .collect::<Result<Vec<f64>>>()?;
    let distance = per_channel.iter().sum::<f64>() / per_channel.len() as f64;
    Ok(QualityScore {
        distance,
        mapped_score: mapping.map(|m| m.apply(distance)),
        mode: ScoreMode::NonMatching,
        aggregation: Some(aggregation),
        channels: t.len(),
    })
}

/// One row of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub test_name: String,
    pub item_id: String,
    pub condition: String,
    pub distance: f64,
    pub mapped_score: Option<f64>,
    pub mode: ScoreMode,
    pub aggregation: Option<Aggregation>,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Serde(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AdaptationMode, Backbone, BackboneConfig};

    fn model() -> EncoderModel {
        let b = Backbone::random(BackboneConfig::toy(3), 3).unwrap();
        EncoderModel::new(b, 8, AdaptationMode::Frozen, None, 3).unwrap()
    }

    fn tone(n: usize, f: f64, amp: f32) -> Vec<f32> {
        (0..n).map(|t| amp * (2.0 * std::f64::consts::PI * f * t as f64 / 8000.0).sin() as f32).collect()
    }

    #[test]
    fn identical_signals_score_zero() {
        let m = model();
        let a = AudioBuffer::mono(tone(4000, 440.0, 0.3), 8000);
        let s = score_full_reference(&m, &a, &a, None).unwrap();
        assert_eq!(s.distance, 0.0);
        assert_eq!(s.mapped_score, None);
    }

    #[test]
    fn full_reference_is_symmetric() {
        let m = model();
        let a = AudioBuffer::mono(tone(4000, 440.0, 0.3), 8000);
        let b = AudioBuffer::mono(tone(4000, 660.0, 0.3), 8000);
        let ab = score_full_reference(&m, &a, &b, None).unwrap().distance;
        let ba = score_full_reference(&m, &b, &a, None).unwrap().distance;
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn stereo_averages_channel_distances() {
        let m = model();
        let (l, r) = (tone(4000, 440.0, 0.3), tone(4000, 880.0, 0.2));
        let reference = AudioBuffer { channels: vec![l.clone(), r.clone()], sample_rate: 8000 };
        let mut r2 = r.clone();
        r2.iter_mut().step_by(7).for_each(|s| *s += 0.05);
        let test = AudioBuffer { channels: vec![l.clone(), r2.clone()], sample_rate: 8000 };
        let s = score_full_reference(&m, &test, &reference, None).unwrap();
        let right = score_full_reference(&m, &AudioBuffer::mono(r2, 8000), &AudioBuffer::mono(r, 8000), None)
            .unwrap()
            .distance;
        assert_eq!(s.channels, 2);
        assert!((s.distance - right / 2.0).abs() < 1e-12);
    }

    #[test]
    fn duration_mismatch_beyond_one_frame_is_rejected() {
        let m = model();
        let hop = m.backbone.cfg.hop_samples();
        let a = AudioBuffer::mono(tone(4000, 440.0, 0.3), 8000);
        let ok = AudioBuffer::mono(tone(4000 + hop, 440.0, 0.3), 8000);
        assert!(score_full_reference(&m, &ok, &a, None).is_ok());
        let bad = AudioBuffer::mono(tone(4001 + hop, 440.0, 0.3), 8000);
        let err = score_full_reference(&m, &bad, &a, None).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
    }

    #[test]
    fn other_input_rates_are_resampled() {
        let m = model();
        let a = AudioBuffer::mono(tone(8000, 440.0, 0.3), 16_000);
        let s = score_full_reference(&m, &a, &a, None).unwrap();
        assert_eq!(s.distance, 0.0);
    }

    #[test]
    fn aggregations_differ_by_construction() {
        let e = vec![1.0, -2.0, 0.5];
        let delta = [0.3, 0.4, 1.2];
        let refs: Vec<Vec<f64>> = [1.0, -1.0]
            .iter()
            .map(|s| e.iter().zip(&delta).map(|(a, d)| a + s * d).collect())
            .collect();
        let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        let mean = nmr_distance(&e, &refs, Aggregation::MeanDistance).unwrap();
        let centroid = nmr_distance(&e, &refs, Aggregation::CentroidDistance).unwrap();
        assert!((mean - norm).abs() < 1e-12);
        assert!(centroid.abs() < 1e-12);
    }

    #[test]
    fn self_reference_scores_zero_both_ways() {
        let m = model();
        let a = AudioBuffer::mono(tone(4000, 440.0, 0.3), 8000);
        let set = ReferenceSet::embed(&m, &[("a".into(), a.clone())]).unwrap();
        for agg in [Aggregation::MeanDistance, Aggregation::CentroidDistance] {
            assert_eq!(score_non_matching(&m, &a, &set, agg, None).unwrap().distance, 0.0);
        }
    }

    #[test]
    fn empty_reference_set_is_rejected() {
        assert!(matches!(
            nmr_distance(&[0.0], &[], Aggregation::MeanDistance),
            Err(Error::Precondition(_))
        ));
        assert!(ReferenceSet::embed(&model(), &[]).is_err());
    }

    #[test]
    fn reference_list_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("refs.txt");
        std::fs::write(&p, "# header\nmusic/a.wav\n\n  speech/b.wav  \n").unwrap();
        let paths = ReferenceSet::read_list(&p).unwrap();
        assert_eq!(paths, vec![dir.path().join("music/a.wav"), dir.path().join("speech/b.wav")]);
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        let rows = vec![
            PredictionRecord {
                test_name: "t1".into(),
                item_id: "a".into(),
                condition: "c1".into(),
                distance: 0.125,
                mapped_score: Some(3.5),
                mode: ScoreMode::FullReference,
                aggregation: None,
            },
            PredictionRecord {
                test_name: "t1".into(),
                item_id: "b".into(),
                condition: "c2".into(),
                distance: 1.0 / 3.0,
                mapped_score: None,
                mode: ScoreMode::NonMatching,
                aggregation: Some(Aggregation::CentroidDistance),
            },
        ];
        write_predictions(&p, &rows).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), rows);
    }
}
