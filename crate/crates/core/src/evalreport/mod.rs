//! Correlation of metric predictions with listening-test results.

mod correlation;
mod listening;

pub use correlation::{average_ranks, linear_fit, pearson, spearman};
pub use listening::{ListeningRow, ListeningTestFile, Scale};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::PredictionRecord;

pub const OVERALL: &str = "overall";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Average predictions and scores per condition before correlating,
    /// instead of one point per (item, condition).
    #[serde(default)]
    pub pool_conditions: bool,
    /// Subgroups that should appear for every test; missing ones are
    /// skipped with a warning. Subgroups found in the data are always reported.
    #[serde(default)]
    pub subgroups: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub checkpoint_hash: Option<String>,
    pub mapping_id: Option<String>,
    pub scoring_mode: Option<String>,
    pub config_hash: Option<String>,
    pub predictions_hash: Option<String>,
    pub pool_conditions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub test_name: String,
    /// `overall` pools every subgroup of the test.
    pub subgroup: String,
    /// `None` when undefined (fewer than 3 points or constant input).
    pub pcc: Option<f64>,
    pub srcc: Option<f64>,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<CorrelationRow>,
}

/// One matched listening-test row with its prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPoint {
    pub test_name: String,
    pub item_id: String,
    pub condition: String,
    pub subgroup: Option<String>,
    pub prediction: f64,
    pub subjective: f64,
}

/// Higher is better: the mapped score when present, else the negated distance.
pub fn prediction_value(p: &PredictionRecord) -> f64 {
    p.mapped_score.unwrap_or(-p.distance)
}

/// Pairs every listening-test row with its prediction, sorted by
/// (test, item, condition).
pub fn match_predictions(predictions: &[PredictionRecord], tests: &[ListeningTestFile]) -> Result<Vec<MatchedPoint>> {
    let mut by_key: HashMap<(&str, &str, &str), &PredictionRecord> = HashMap::new();
    for p in predictions {
        if by_key.insert((&p.test_name, &p.item_id, &p.condition), p).is_some() {
            return Err(Error::Validation(format!(
                "duplicate prediction for {}:{}:{}",
                p.test_name, p.item_id, p.condition
            )));
        }
    }
    let mut names = BTreeSet::new();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for t in tests {
        if !names.insert(t.test_name.as_str()) {
            return Err(Error::Validation(format!("listening test `{}` given twice", t.test_name)));
        }
        for r in &t.rows {
            match by_key.get(&(t.test_name.as_str(), r.item_id.as_str(), r.condition.as_str())) {
                Some(p) => out.push(MatchedPoint {
                    test_name: t.test_name.clone(),
                    item_id: r.item_id.clone(),
                    condition: r.condition.clone(),
                    subgroup: r.subgroup.clone(),
                    prediction: prediction_value(p),
                    subjective: r.subjective_score,
                }),
                None => missing.push(format!("{}:{}:{}", t.test_name, r.item_id, r.condition)),
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Coverage(missing));
    }
    out.sort_by(|a, b| {
        (&a.test_name, &a.item_id, &a.condition).cmp(&(&b.test_name, &b.item_id, &b.condition))
    });
    Ok(out)
}

/// Per-condition means, ordered by condition.
fn pool_by_condition(points: &[&MatchedPoint]) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for p in points {
        let e = acc.entry(p.condition.as_str()).or_insert((0.0, 0.0, 0));
        e.0 += p.prediction;
        e.1 += p.subjective;
        e.2 += 1;
    }
    acc.values().map(|(x, y, n)| (x / *n as f64, y / *n as f64)).collect()
}

fn correlation_row(test_name: &str, subgroup: &str, points: &[&MatchedPoint], pool: bool) -> CorrelationRow {
    let pairs: Vec<(f64, f64)> = if pool {
        pool_by_condition(points)
    } else {
        points.iter().map(|p| (p.prediction, p.subjective)).collect()
    };
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    CorrelationRow {
        test_name: test_name.into(),
        subgroup: subgroup.into(),
        pcc: pearson(&x, &y).ok(),
        srcc: spearman(&x, &y).ok(),
        n_items: x.len(),
    }
}

/// Subgroups to report for one test, in sorted order, with declared but
/// empty ones dropped.
fn subgroups_of(test_name: &str, points: &[&MatchedPoint], declared: &[String]) -> Vec<String> {
    let found: BTreeSet<&str> = points.iter().filter_map(|p| p.subgroup.as_deref()).collect();
    for d in declared {
        if !found.contains(d.as_str()) {
            log::warn!("test {test_name}: subgroup `{d}` has no rows, omitted");
        }
    }
    found.into_iter().map(str::to_string).collect()
}

/// PCC and SRCC per test and per subgroup. Independent of input row order.
pub fn evaluate(
    predictions: &[PredictionRecord],
    tests: &[ListeningTestFile],
    opts: &EvalOptions,
    mut metadata: ReportMetadata,
) -> Result<CorrelationReport> {
    let points = match_predictions(predictions, tests)?;
    let mut per_test: BTreeMap<&str, Vec<&MatchedPoint>> = BTreeMap::new();
    for p in &points {
        per_test.entry(p.test_name.as_str()).or_default().push(p);
    }
    let mut rows = Vec::new();
    for (name, pts) in &per_test {
        rows.push(correlation_row(name, OVERALL, pts, opts.pool_conditions));
        for sg in subgroups_of(name, pts, &opts.subgroups) {
            let sub: Vec<&MatchedPoint> = pts.iter().copied().filter(|p| p.subgroup.as_deref() == Some(&sg)).collect();
            rows.push(correlation_row(name, &sg, &sub, opts.pool_conditions));
        }
    }
    if metadata.scoring_mode.is_none() {
        let modes: BTreeSet<&str> = predictions.iter().map(|p| p.mode.as_str()).collect();
        metadata.scoring_mode = Some(modes.into_iter().collect::<Vec<_>>().join("+"));
    }
    metadata.pool_conditions = opts.pool_conditions;
    Ok(CorrelationReport { metadata, rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |v| format!("{v:.4}"))
}

impl CorrelationReport {
    pub fn to_text(&self) -> String {
        let m = &self.metadata;
        let mut s = String::new();
        let none = || "-".to_string();
        let _ = writeln!(s, "checkpoint: {}", m.checkpoint_hash.clone().unwrap_or_else(none));
        let _ = writeln!(s, "mapping:    {}", m.mapping_id.clone().unwrap_or_else(none));
        let _ = writeln!(s, "mode:       {}", m.scoring_mode.clone().unwrap_or_else(none));
        let _ = writeln!(s, "config:     {}", m.config_hash.clone().unwrap_or_else(none));
        let _ = writeln!(s, "pooling:    {}", if m.pool_conditions { "per condition" } else { "per item" });
        let tw = self.rows.iter().map(|r| r.test_name.len()).max().unwrap_or(0).max(4);
        let gw = self.rows.iter().map(|r| r.subgroup.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(s, "\n{:<tw$}  {:<gw$}  {:>7}  {:>7}  {:>5}", "test", "subgroup", "PCC", "SRCC", "n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<tw$}  {:<gw$}  {:>7}  {:>7}  {:>5}",
                r.test_name,
                r.subgroup,
                fmt_opt(r.pcc),
                fmt_opt(r.srcc),
                r.n_items
            );
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.txt`.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let json = stem.with_extension("json");
        let txt = stem.with_extension("txt");
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        Ok((json, txt))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn row(&self, test_name: &str, subgroup: &str) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.test_name == test_name && r.subgroup == subgroup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub prediction: f64,
    pub subjective: f64,
    pub test_name: String,
    pub subgroup: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub test_name: String,
    /// `subjective ≈ slope * prediction + intercept`; empty when undefined.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub n: usize,
}

/// Path of the regression table written next to a scatter file.
pub fn regression_path(scatter: &Path) -> PathBuf {
    let stem = scatter.file_stem().and_then(|s| s.to_str()).unwrap_or("scatter");
    scatter.with_file_name(format!("{stem}_regression.csv"))
}

/// Writes one row per matched (item, condition) to `path` and the per-test
/// least-squares lines to [`regression_path`]`(path)`.
pub fn export_scatter(
    predictions: &[PredictionRecord],
    tests: &[ListeningTestFile],
    opts: &EvalOptions,
    path: &Path,
) -> Result<Vec<Regression>> {
    let points = match_predictions(predictions, tests)?;
    let declared: BTreeSet<&str> = opts.subgroups.iter().map(String::as_str).collect();
    for t in tests {
        for d in &declared {
            if !t.rows.iter().any(|r| r.subgroup.as_deref() == Some(d)) {
                log::warn!("test {}: subgroup `{d}` has no rows, omitted", t.test_name);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    for p in &points {
        w.serialize(ScatterPoint {
            prediction: p.prediction,
            subjective: p.subjective,
            test_name: p.test_name.clone(),
            subgroup: p.subgroup.clone().unwrap_or_default(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let mut per_test: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in &points {
        let e = per_test.entry(p.test_name.as_str()).or_default();
        e.0.push(p.prediction);
        e.1.push(p.subjective);
    }
    let regs: Vec<Regression> = per_test
        .into_iter()
        .map(|(name, (x, y))| {
            let fit = linear_fit(&x, &y);
            Regression { test_name: name.into(), slope: fit.map(|f| f.0), intercept: fit.map(|f| f.1), n: x.len() }
        })
        .collect();
    let rp = regression_path(path);
    let mut w = csv::Writer::from_path(&rp).map_err(|e| Error::Serde(format!("{}: {e}", rp.display())))?;
    for r in &regs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&rp, e))?;
    Ok(regs)
}
