//! Listening-test result files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::ScaleBounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 1 to 5.
    Mos,
    /// 0 to 100.
    Mushra,
}

impl Scale {
    pub fn bounds(self) -> ScaleBounds {
        match self {
            Scale::Mos => ScaleBounds::MOS,
            Scale::Mushra => ScaleBounds::MUSHRA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListeningRow {
    pub item_id: String,
    pub condition: String,
    /// Mean across listeners.
    pub subjective_score: f64,
    pub test_path: PathBuf,
    pub reference_path: PathBuf,
    pub subgroup: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListeningTestFile {
    pub test_name: String,
    pub scale: Scale,
    pub rows: Vec<ListeningRow>,
}

const REQUIRED: [&str; 5] = ["test_name", "item_id", "condition", "test_path", "reference_path"];

impl ListeningTestFile {
    /// Reads a comma-separated file. See `docs/listening_test_format.md`.
    /// Relative audio paths resolve against the file's directory.
    pub fn read(path: &Path, scale: Scale) -> Result<Self> {
        let ctx = |m: String| Error::Validation(format!("{}: {m}", path.display()));
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| ctx(e.to_string()))?;
        let header = rdr.headers().map_err(|e| ctx(e.to_string()))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let mut idx = Vec::new();
        for name in REQUIRED {
            idx.push(col(name).ok_or_else(|| ctx(format!("missing column `{name}`")))?);
        }
        let score_col = col("subjective_score");
        let subgroup_col = col("subgroup");
        let listener_cols: Vec<usize> =
            header.iter().enumerate().filter(|(_, h)| h.starts_with("listener_")).map(|(i, _)| i).collect();
        if score_col.is_none() && listener_cols.is_empty() {
            return Err(ctx("need `subjective_score` or `listener_*` columns".into()));
        }
        let bounds = scale.bounds();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut test_name: Option<String> = None;
        let mut seen = BTreeSet::new();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ctx(e.to_string()))?;
            let at = |m: String| ctx(format!("row {}: {m}", line + 1));
            let field = |i: usize| rec.get(i).unwrap_or("");
            let name = field(idx[0]);
            match &test_name {
                None => test_name = Some(name.to_string()),
                Some(t) if t != name => return Err(at(format!("test_name `{name}` differs from `{t}`"))),
                _ => {}
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| at(format!("not a number: `{s}`")));
            let score = match score_col.map(field).filter(|s| !s.is_empty()) {
                Some(s) => parse(s)?,
                None => {
                    let mut v = Vec::new();
                    for &c in &listener_cols {
                        let s = field(c);
                        if !s.is_empty() {
                            v.push(parse(s)?);
                        }
                    }
                    if v.is_empty() {
                        return Err(at("no subjective score".into()));
                    }
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            if !(score >= bounds.lo && score <= bounds.hi) {
                return Err(at(format!("score {score} outside [{}, {}]", bounds.lo, bounds.hi)));
            }
            let (item_id, condition) = (field(idx[1]).to_string(), field(idx[2]).to_string());
            if item_id.is_empty() || condition.is_empty() {
                return Err(at("empty item_id or condition".into()));
            }
            if !seen.insert((item_id.clone(), condition.clone())) {
                return Err(at(format!("duplicate (item_id, condition) = ({item_id}, {condition})")));
            }
            rows.push(ListeningRow {
                item_id,
                condition,
                subjective_score: score,
                test_path: base.join(field(idx[3])),
                reference_path: base.join(field(idx[4])),
                subgroup: subgroup_col.map(field).filter(|s| !s.is_empty()).map(str::to_string),
            });
        }
        let test_name = test_name.ok_or_else(|| ctx("no rows".into()))?;
        if test_name.is_empty() {
            return Err(ctx("empty test_name".into()));
        }
        Ok(Self { test_name, scale, rows })
    }
}
