//! Surrogate quality labels: an objective-metric MOS per degraded clip and
//! the coding bitrate, with `+inf` standing for the uncoded original.

pub mod labeler;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::audio;
use crate::corpus::{Bitrate, ClipRecord, Codec, Manifest};
use crate::error::{Error, Result};

pub use labeler::{
    label_with_visqol, CachedLabeler, LabelCache, Labeler, ProcessLabeler, ProcessLabelerConfig,
    StubLabeler, VisqolMode,
};

/// MOS assigned to clean clips without running the labeler.
pub const CLEAN_MOS: f64 = 5.0;

/// A real number or `+inf`, totally ordered with `+inf` above every finite value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExtendedReal {
    Finite(f64),
    PosInf,
}

impl ExtendedReal {
    pub fn is_inf(self) -> bool {
        matches!(self, ExtendedReal::PosInf)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::PosInf => None,
        }
    }
}

impl Eq for ExtendedReal {}

impl Ord for ExtendedReal {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => a.total_cmp(b),
            (ExtendedReal::Finite(_), ExtendedReal::PosInf) => Ordering::Less,
            (ExtendedReal::PosInf, ExtendedReal::Finite(_)) => Ordering::Greater,
            (ExtendedReal::PosInf, ExtendedReal::PosInf) => Ordering::Equal,
        }
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedReal::Finite(v) => write!(f, "{v}"),
            ExtendedReal::PosInf => f.write_str("inf"),
        }
    }
}

impl From<f64> for ExtendedReal {
    fn from(v: f64) -> Self {
        if v == f64::INFINITY {
            ExtendedReal::PosInf
        } else {
            ExtendedReal::Finite(v)
        }
    }
}

impl From<Bitrate> for ExtendedReal {
    fn from(b: Bitrate) -> Self {
        match b {
            Bitrate::Kbps(k) => ExtendedReal::Finite(f64::from(k)),
            Bitrate::Inf => ExtendedReal::PosInf,
        }
    }
}

/// `|a - b|` with `|x - inf| = inf` for finite `x` and `|inf - inf| = 0`.
pub fn label_distance(a: ExtendedReal, b: ExtendedReal) -> ExtendedReal {
    match (a, b) {
        (ExtendedReal::Finite(x), ExtendedReal::Finite(y)) => ExtendedReal::Finite((x - y).abs()),
        (ExtendedReal::PosInf, ExtendedReal::PosInf) => ExtendedReal::Finite(0.0),
        _ => ExtendedReal::PosInf,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateLabel {
    pub visqol_mos: f64,
    pub bitrate: ExtendedReal,
    pub codec: Codec,
}

impl SurrogateLabel {
    pub fn clean() -> Self {
        Self {
            visqol_mos: CLEAN_MOS,
            bitrate: ExtendedReal::PosInf,
            codec: Codec::None,
        }
    }

    pub fn coded(codec: Codec, kbps: u32, visqol_mos: f64) -> Self {
        Self {
            visqol_mos,
            bitrate: ExtendedReal::Finite(f64::from(kbps)),
            codec,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.codec == Codec::None
    }

    pub fn check(&self) -> Result<()> {
        if self.is_clean() != self.bitrate.is_inf() {
            return Err(Error::Validation(format!(
                "codec {} inconsistent with bitrate {}",
                self.codec, self.bitrate
            )));
        }
        if !(1.0..=5.0).contains(&self.visqol_mos) {
            return Err(Error::Validation(format!(
                "MOS {} outside [1, 5]",
                self.visqol_mos
            )));
        }
        Ok(())
    }

    /// Label of a manifest record; clean records get [`CLEAN_MOS`], coded
    /// records must already be labeled.
    pub fn from_record(r: &ClipRecord) -> Result<Self> {
        let label = if r.is_clean() {
            Self::clean()
        } else {
            let mos = r.visqol_mos.ok_or_else(|| {
                Error::Validation(format!("{} has no surrogate MOS; run labeling", r.clip_path))
            })?;
            Self {
                visqol_mos: mos,
                bitrate: r.bitrate_kbps.into(),
                codec: r.codec,
            }
        };
        label.check()?;
        Ok(label)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labeled: usize,
    pub clean: usize,
    /// `clip_path: error` for every record that could not be labeled.
    pub failures: Vec<String>,
}

/// Fills `visqol_mos` for every record: clean records get [`CLEAN_MOS`]
/// without invoking the tool, coded records are scored against their
/// reference. Failures are collected; their records stay unlabeled.
pub fn label_manifest(m: &mut Manifest, labeler: &dyn Labeler) -> LabelSummary {
    let results: Vec<Option<Result<f64>>> = m
        .records
        .par_iter()
        .map(|r| {
            if r.is_clean() {
                return None;
            }
            Some((|| {
                let deg = audio::read_clip(&m.resolve(&r.clip_path))?;
                let reference = audio::read_clip(&m.resolve(&r.reference_path))?;
                label_with_visqol(labeler, &deg, &reference)
            })())
        })
        .collect();
    let mut summary = LabelSummary::default();
    for (r, res) in m.records.iter_mut().zip(results) {
        match res {
            None => {
                r.visqol_mos = Some(CLEAN_MOS);
                summary.clean += 1;
            }
            Some(Ok(v)) => {
                r.visqol_mos = Some(v);
                summary.labeled += 1;
            }
            Some(Err(e)) => {
                r.visqol_mos = None;
                summary.failures.push(format!("{}: {e}", r.clip_path));
            }
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ExtendedReal::{Finite, PosInf};

    #[test]
    fn distance_examples() {
        assert_eq!(label_distance(Finite(16.0), Finite(128.0)), Finite(112.0));
        assert_eq!(label_distance(Finite(64.0), PosInf), PosInf);
        assert_eq!(label_distance(PosInf, PosInf), Finite(0.0));
    }

    #[test]
    fn clean_label_invariants() {
        let c = SurrogateLabel::clean();
        c.check().unwrap();
        assert_eq!(c.visqol_mos, 5.0);
        let bad = SurrogateLabel {
            codec: Codec::Opus,
            ..c
        };
        assert!(bad.check().is_err());
    }

    fn ext() -> impl Strategy<Value = ExtendedReal> {
        prop_oneof![
            3 => (-1e6f64..1e6).prop_map(Finite),
            1 => Just(PosInf),
        ]
    }

    proptest! {
        #[test]
        fn distance_symmetric_and_nonnegative(a in ext(), b in ext()) {
            let d = label_distance(a, b);
            prop_assert_eq!(d, label_distance(b, a));
            prop_assert!(d >= Finite(0.0));
            prop_assert_eq!(d == Finite(0.0), a == b);
        }

        #[test]
        fn inf_dominates(a in -1e9f64..1e9) {
            prop_assert!(PosInf >= Finite(a));
            prop_assert_eq!(label_distance(Finite(a), PosInf), PosInf);
        }
    }
}
