//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::toy::ToySourceConfig;
use crate::corpus::{CorpusConfig, ExternalTranscoder, ToyTranscoder, Transcoder};
use crate::encoder::{load_pretrained, Backbone, BackboneConfig, PretrainedSource};
use crate::error::{Error, Result};
use crate::evalreport::Scale;
use crate::scorer::{Aggregation, MlpConfig, ScoreMode};
use crate::surrogate::{Labeler, ProcessLabeler, ProcessLabelerConfig, StubLabeler};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory of source `*.wav` files.
    pub sources: PathBuf,
    /// Manifest tree root; the manifest is `<corpus>/manifest.jsonl`.
    pub corpus: PathBuf,
    /// Training output directory.
    pub run: PathBuf,
    /// On-disk label cache; none keeps the cache in memory.
    pub label_cache: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            sources: "sources".into(),
            corpus: "corpus".into(),
            run: "run".into(),
            label_cache: None,
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.corpus.join("manifest.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TranscoderConfig {
    Toy(ToyTranscoder),
    External(ExternalTranscoder),
}

impl Default for TranscoderConfig {
    fn default() -> Self {
        TranscoderConfig::Toy(ToyTranscoder::default())
    }
}

impl TranscoderConfig {
    pub fn build(&self) -> Box<dyn Transcoder> {
        match self {
            TranscoderConfig::Toy(t) => Box::new(t.clone()),
            TranscoderConfig::External(t) => Box::new(t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelerConfig {
    Stub(StubLabeler),
    Process(ProcessLabelerConfig),
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig::Stub(StubLabeler::default())
    }
}

impl LabelerConfig {
    pub fn build(&self) -> Result<Box<dyn Labeler>> {
        Ok(match self {
            LabelerConfig::Stub(s) => Box::new(s.clone()),
            LabelerConfig::Process(c) => Box::new(ProcessLabeler::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneChoice {
    /// Randomly initialised toy backbone.
    Toy {
        seed: u64,
        #[serde(default)]
        log_energy_floor: Option<f64>,
    },
    /// Published weights in a directory with `config.json` and `*.safetensors`.
    Pretrained {
        dir: PathBuf,
        #[serde(default)]
        id: Option<String>,
        revision: String,
        #[serde(default = "default_pretrained_rate")]
        sample_rate: u32,
    },
}

fn default_pretrained_rate() -> u32 {
    24_000
}

impl Default for BackboneChoice {
    fn default() -> Self {
        BackboneChoice::Toy {
            seed: 1,
            log_energy_floor: None,
        }
    }
}

impl BackboneChoice {
    pub fn load(&self) -> Result<Backbone> {
        match self {
            BackboneChoice::Toy { seed, log_energy_floor } => {
                let mut cfg = BackboneConfig::toy(*seed);
                if log_energy_floor.is_some() {
                    cfg.log_energy_floor = *log_energy_floor;
                }
                Backbone::random(cfg, *seed)
            }
            BackboneChoice::Pretrained {
                dir,
                id,
                revision,
                sample_rate,
            } => load_pretrained(&PretrainedSource {
                dir: dir.clone(),
                id: id.clone(),
                revision: revision.clone(),
                default_sample_rate: *sample_rate,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub mode: ScoreMode,
    pub aggregation: Aggregation,
    /// Checkpoint to score with; defaults to `<run>/best.safetensors`.
    pub checkpoint: Option<PathBuf>,
    /// Reference list for non-matching scoring, one path per line.
    pub reference_list: Option<PathBuf>,
    /// Mapping applied to distances, if any.
    pub mapping: Option<PathBuf>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mode: ScoreMode::FullReference,
            aggregation: Aggregation::MeanDistance,
            checkpoint: None,
            reference_list: None,
            mapping: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    #[default]
    Cubic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    pub kind: MappingKind,
    pub mlp: MlpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub scale: Scale,
    /// Listening-test files; command-line arguments take precedence.
    pub tests: Vec<PathBuf>,
    pub pool_conditions: bool,
    pub subgroups: Vec<String>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Mushra,
            tests: Vec::new(),
            pool_conditions: false,
            subgroups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub toy: ToySourceConfig,
    pub corpus: CorpusConfig,
    pub transcoder: TranscoderConfig,
    pub labeler: LabelerConfig,
    pub backbone: BackboneChoice,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub mapping: MappingConfig,
    pub evaluate: EvaluateConfig,
    /// The configuration as written plus overrides, before relative paths
    /// are resolved; this is what provenance records and hashes.
    #[serde(skip)]
    pub echo: Option<serde_json::Value>,
}

/// Parses `value` as a TOML value, falling back to a plain string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or defaults when `None`), applies overrides in order,
    /// and resolves relative paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.echo = Some(serde_json::to_value(&cfg)?);
        if let Some(base) = path.and_then(Path::parent) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.sources);
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.run);
        for p in [
            self.paths.label_cache.as_mut(),
            self.score.checkpoint.as_mut(),
            self.score.reference_list.as_mut(),
            self.score.mapping.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let BackboneChoice::Pretrained { dir, .. } = &mut self.backbone {
            fix(dir);
        }
        self.evaluate.tests.iter_mut().for_each(fix);
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.score
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.run.join("best.safetensors"))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        match &self.echo {
            Some(v) => Ok(v.clone()),
            None => Ok(serde_json::to_value(self)?),
        }
    }
}
