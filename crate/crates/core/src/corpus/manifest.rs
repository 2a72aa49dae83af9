//! Split manifests: one JSON header line followed by one JSON object per clip.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Bitrate, Codec, Split};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub kind: String,
    pub version: u32,
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub ladder: Vec<u32>,
    pub codecs: Vec<Codec>,
    pub split_fractions: BTreeMap<Split, f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    /// `<source_id>/<clip index>`, shared by a clean clip and all its coded variants.
    pub clip_id: String,
    pub source_id: String,
    pub offset_seconds: f64,
    pub codec: Codec,
    pub bitrate_kbps: Bitrate,
    pub split: Split,
    /// Relative to the manifest root.
    pub clip_path: String,
    /// The clean clip this record was derived from (itself for clean records).
    pub reference_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visqol_mos: Option<f64>,
}

impl ClipRecord {
    pub fn is_clean(&self) -> bool {
        self.codec == Codec::None
    }

    pub fn check(&self) -> Result<()> {
        if (self.codec == Codec::None) != (self.bitrate_kbps == Bitrate::Inf) {
            return Err(Error::Validation(format!(
                "{}: codec {} inconsistent with bitrate {}",
                self.clip_path, self.codec, self.bitrate_kbps
            )));
        }
        if let Some(v) = self.visqol_mos {
            if !(1.0..=5.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "{}: visqol_mos {v} outside [1, 5]",
                    self.clip_path
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn sources_by_split(&self) -> BTreeMap<Split, BTreeSet<String>> {
        let mut m: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
        for r in &self.records {
            m.entry(r.split).or_default().insert(r.source_id.clone());
        }
        m
    }

    pub fn validate(&self, check_files: bool) -> Result<()> {
        let by_split = self.sources_by_split();
        let splits: Vec<_> = by_split.iter().collect();
        for (i, (sa, a)) in splits.iter().enumerate() {
            for (sb, b) in &splits[i + 1..] {
                if let Some(s) = a.intersection(b).next() {
                    return Err(Error::Validation(format!(
                        "source {s} appears in both {sa} and {sb}"
                    )));
                }
            }
        }
        for r in &self.records {
            r.check()?;
            if check_files && !self.resolve(&r.clip_path).is_file() {
                return Err(Error::Validation(format!("missing clip file {}", r.clip_path)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; record paths resolve against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Validation(format!("{}: empty manifest", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        if header.kind != "manifest" || header.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "{}: not a version {MANIFEST_VERSION} manifest",
                path.display()
            )));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest {
            root,
            header,
            records,
        };
        m.validate(false)?;
        Ok(m)
    }
}

/// Files produced for one clip: the clean version and every coded variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFiles {
    pub index: usize,
    pub offset_seconds: f64,
    pub clean: String,
    pub coded: BTreeMap<(Codec, u32), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceClips {
    pub source_id: String,
    pub clips: Vec<ClipFiles>,
}

fn check_fractions(fractions: &BTreeMap<Split, f64>) -> Result<()> {
    if fractions.is_empty() || fractions.values().any(|&f| !(f > 0.0)) {
        return Err(Error::Validation("split fractions must be positive".into()));
    }
    let sum: f64 = fractions.values().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split fractions sum to {sum}, not 1")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` sources over the splits.
fn split_counts(n: usize, fractions: &BTreeMap<Split, f64>) -> Vec<(Split, usize)> {
    let mut counts: Vec<(Split, usize, f64)> = fractions
        .iter()
        .map(|(&s, &f)| {
            let exact = f * n as f64;
            (s, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].2.total_cmp(&counts[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        counts[i].1 += 1;
    }
    counts.into_iter().map(|(s, c, _)| (s, c)).collect()
}

/// Assigns sources to splits (seeded, disjoint by source) and lists one record
/// per clean clip and per coded variant. Every path must exist under `root`.
pub fn build_manifest(
    root: &Path,
    sources: &[SourceClips],
    ladder: &[u32],
    codecs: &[Codec],
    fractions: &BTreeMap<Split, f64>,
    sample_rate: u32,
    clip_seconds: f64,
    seed: u64,
) -> Result<Manifest> {
    check_fractions(fractions)?;
    let mut ids = BTreeSet::new();
    for s in sources {
        if !ids.insert(s.source_id.as_str()) {
            return Err(Error::Validation(format!("duplicate source_id {}", s.source_id)));
        }
    }

    let mut gaps = Vec::new();
    for s in sources {
        for c in &s.clips {
            let mut all = vec![c.clean.clone()];
            for &codec in codecs {
                for &kbps in ladder {
                    match c.coded.get(&(codec, kbps)) {
                        Some(p) => all.push(p.clone()),
                        None => gaps.push(format!("{}/{}: {codec}@{kbps} not encoded", s.source_id, c.index)),
                    }
                }
            }
            gaps.extend(
                all.into_iter()
                    .filter(|p| !root.join(p).is_file())
                    .map(|p| format!("{p}: file missing")),
            );
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Validation(format!("manifest gaps: {}", gaps.join("; "))));
    }

    let mut order: Vec<&str> = ids.into_iter().collect();
    order.shuffle(&mut rng::substream(seed, "split"));
    let mut split_of = BTreeMap::new();
    let mut it = order.into_iter();
    for (split, count) in split_counts(sources.len(), fractions) {
        for id in it.by_ref().take(count) {
            split_of.insert(id.to_string(), split);
        }
    }

    let mut sorted: Vec<&SourceClips> = sources.iter().collect();
    sorted.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let mut records = Vec::new();
    for s in sorted {
        let split = split_of[&s.source_id];
        for c in &s.clips {
            let clip_id = format!("{}/{:04}", s.source_id, c.index);
            records.push(ClipRecord {
                clip_id: clip_id.clone(),
                source_id: s.source_id.clone(),
                offset_seconds: c.offset_seconds,
                codec: Codec::None,
                bitrate_kbps: Bitrate::Inf,
                split,
                clip_path: c.clean.clone(),
                reference_path: c.clean.clone(),
                visqol_mos: None,
            });
            for &codec in codecs {
                for &kbps in ladder {
                    records.push(ClipRecord {
                        clip_id: clip_id.clone(),
                        source_id: s.source_id.clone(),
                        offset_seconds: c.offset_seconds,
                        codec,
                        bitrate_kbps: Bitrate::Kbps(kbps),
                        split,
                        clip_path: c.coded[&(codec, kbps)].clone(),
                        reference_path: c.clean.clone(),
                        visqol_mos: None,
                    });
                }
            }
        }
    }

    let m = Manifest {
        root: root.to_path_buf(),
        header: ManifestHeader {
            kind: "manifest".into(),
            version: MANIFEST_VERSION,
            sample_rate,
            clip_seconds,
            ladder: ladder.to_vec(),
            codecs: codecs.to_vec(),
            split_fractions: fractions.clone(),
            seed,
        },
        records,
    };
    m.validate(true)?;
    Ok(m)
}
