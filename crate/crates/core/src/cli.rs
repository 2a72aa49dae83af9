//! Command-line entry point: one subcommand per pipeline stage.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::audio;
use crate::config::{BackboneChoice, LabelerConfig, MappingKind, RunConfig, TranscoderConfig};
use crate::corpus::toy::write_sources;
use crate::corpus::{list_sources, prepare_corpus, Bitrate, Manifest, Split};
use crate::encoder::{load_checkpoint, EncoderModel};
use crate::error::{Error, Result};
use crate::evalreport::{
    evaluate, export_scatter, CorrelationReport, EvalOptions, ListeningTestFile, ReportMetadata, Scale,
};
use crate::provenance::{sha256_file, Provenance};
use crate::scorer::{
    read_predictions, score_full_reference, score_non_matching, write_predictions, DistanceMapping,
    PredictionRecord, ReferenceSet,
};
use crate::surrogate::{label_manifest, CachedLabeler, LabelCache, LabelSummary, Labeler};
use crate::trainer::{train, TrainSummary};

#[derive(Debug, Parser)]
#[command(name = "aqlearn", version, about = "Learned perceptual audio quality metric")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.max_epochs=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 gives the single-threaded reference mode).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic source recordings to `paths.sources`.
    ToySources,
    /// Segment sources, encode the bitrate ladder, resample and split.
    Prepare,
    /// Fill surrogate MOS labels in the manifest.
    Label,
    /// Train the encoder on the labeled manifest.
    Train,
    /// Write a listening-test file from the held-out split of a labeled toy corpus.
    ToyTest {
        #[arg(long, default_value = "listening_test.csv")]
        name: String,
    },
    /// Score listening-test rows, or one test/reference pair.
    Score(ScoreArgs),
    /// Fit a distance-to-score mapping on predictions and subjective scores.
    FitMapping {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long = "tests")]
        tests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate predictions with listening-test results.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long = "tests")]
        tests: Vec<PathBuf>,
        /// Report path without extension; `.json` and `.txt` are written.
        #[arg(long)]
        out: PathBuf,
        /// Scatter-data CSV; the regression table goes next to it.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Run the whole toy pipeline.
    Demo,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long = "tests")]
    pub tests: Vec<PathBuf>,
    /// Prediction CSV for listening-test scoring.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ad-hoc test signal.
    #[arg(long, requires = "reference")]
    pub test: Option<PathBuf>,
    /// Ad-hoc reference signal (full-reference mode).
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

/// Loaded configuration plus the overrides that produced it.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub overrides: Vec<String>,
}

impl Context {
    pub fn load(global: &GlobalArgs) -> Result<Self> {
        let mut overrides = global.overrides.clone();
        if let Some(s) = global.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = RunConfig::load(global.config.as_deref(), &overrides)?;
        Ok(Self { cfg, overrides })
    }

    pub fn from_config(cfg: RunConfig) -> Self {
        Self { cfg, overrides: Vec::new() }
    }

    fn provenance(&self, command: &str) -> Result<Provenance> {
        let mut p = Provenance::new(command, self.cfg.seed, self.cfg.to_json()?, self.overrides.clone())?;
        for (k, v) in environment(&self.cfg) {
            p.environment.insert(k, v);
        }
        Ok(p)
    }

    fn tests(&self, given: &[PathBuf]) -> Result<Vec<ListeningTestFile>> {
        let paths = if given.is_empty() { &self.cfg.evaluate.tests } else { given };
        if paths.is_empty() {
            return Err(Error::Config("no listening-test files given (--tests or evaluate.tests)".into()));
        }
        paths.iter().map(|p| ListeningTestFile::read(p, self.cfg.evaluate.scale)).collect()
    }
}

/// `AQLEARN_*` variables and those referenced by external tool templates.
fn environment(cfg: &RunConfig) -> Vec<(String, String)> {
    let mut names: Vec<String> = std::env::vars().map(|(k, _)| k).filter(|k| k.starts_with("AQLEARN_")).collect();
    if let TranscoderConfig::External(t) = &cfg.transcoder {
        for a in t.encode.iter().chain(&t.decode) {
            if let Some(v) = a.strip_prefix("${").and_then(|a| a.strip_suffix('}')) {
                names.push(v.to_string());
            }
        }
    }
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|k| {
            let v = std::env::var(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

/// Exclusive lock on a manifest tree, held until the returned file drops.
pub fn lock_tree(dir: &Path) -> Result<File> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(".aqlearn.lock");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    match f.try_lock() {
        Ok(()) => Ok(f),
        Err(std::fs::TryLockError::WouldBlock) => Err(Error::Validation(format!(
            "{} is locked by another aqlearn process",
            dir.display()
        ))),
        Err(std::fs::TryLockError::Error(e)) => Err(Error::io(&path, e)),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn cmd_toy_sources(ctx: &Context) -> Result<Vec<PathBuf>> {
    let c = &ctx.cfg;
    let files = write_sources(&c.paths.sources, &c.toy, c.seed)?;
    let p = ctx.provenance("toy-sources")?;
    p.write(&c.paths.sources.join("toy-sources.provenance.json"))?;
    log::info!("wrote {} sources to {}", files.len(), c.paths.sources.display());
    Ok(files)
}

pub fn cmd_prepare(ctx: &Context) -> Result<Manifest> {
    let c = &ctx.cfg;
    let _lock = lock_tree(&c.paths.corpus)?;
    let sources = list_sources(&c.paths.sources)?;
    if sources.is_empty() {
        return Err(Error::Precondition(format!("no *.wav sources in {}", c.paths.sources.display())));
    }
    let transcoder = c.transcoder.build();
    let m = prepare_corpus(&sources, &c.paths.corpus, &c.corpus, transcoder.as_ref(), c.seed)?;
    let path = c.paths.manifest();
    m.write(&path)?;
    let mut p = ctx.provenance("prepare")?;
    for s in &sources {
        p.add_input(s)?;
    }
    p.environment.insert("transcoder".into(), transcoder.version());
    p.artifacts.insert("manifest".into(), sha256_file(&path)?);
    p.write(&sidecar(&path))?;
    log::info!("prepared {} records in {}", m.records.len(), path.display());
    Ok(m)
}

pub fn cmd_label(ctx: &Context) -> Result<LabelSummary> {
    let c = &ctx.cfg;
    let _lock = lock_tree(&c.paths.corpus)?;
    let path = c.paths.manifest();
    let mut p = ctx.provenance("label")?;
    p.add_input(&path)?;
    let mut m = Manifest::read(&path)?;
    let cache = match &c.paths.label_cache {
        Some(d) => LabelCache::on_disk(d.clone()),
        None => LabelCache::in_memory(),
    };
    let labeler = CachedLabeler::new(c.labeler.build()?, cache);
    let summary = label_manifest(&mut m, &labeler);
    m.write(&path)?;
    p.environment.insert("labeler".into(), labeler.version());
    p.artifacts.insert("manifest".into(), sha256_file(&path)?);
    p.artifacts.insert("labeler_calls".into(), labeler.misses().to_string());
    p.write(&path.with_file_name("manifest.jsonl.label.provenance.json"))?;
    if !summary.failures.is_empty() {
        return Err(Error::Labeling(format!(
            "{} of {} records failed; first: {}",
            summary.failures.len(),
            summary.failures.len() + summary.labeled,
            summary.failures[0]
        )));
    }
    log::info!("labeled {} coded and {} clean records", summary.labeled, summary.clean);
    Ok(summary)
}

pub fn cmd_train(ctx: &Context) -> Result<TrainSummary> {
    let c = &ctx.cfg;
    let path = c.paths.manifest();
    let m = Manifest::read(&path)?;
    let backbone = c.backbone.load()?;
    let mut model = EncoderModel::new(
        backbone,
        c.train.embedding_dim,
        c.train.adaptation_mode,
        Some(&c.train.lora),
        c.seed,
    )?;
    let echo = c.to_json()?;
    let summary = train(&m, &mut model, &c.train, c.seed, &c.paths.run, &echo)?;
    let mut p = ctx.provenance("train")?;
    p.add_input(&path)?;
    p.artifacts.insert("best_checkpoint".into(), sha256_file(&summary.best_checkpoint)?);
    p.artifacts.insert("last_checkpoint".into(), sha256_file(&summary.last_checkpoint)?);
    p.artifacts.insert("metrics".into(), sha256_file(&summary.metrics)?);
    p.write(&c.paths.run.join("train.provenance.json"))?;
    Ok(summary)
}

/// The trained model named by the configuration.
pub fn load_model(cfg: &RunConfig) -> Result<EncoderModel> {
    load_checkpoint(&cfg.checkpoint(), cfg.backbone.load()?)
}

pub fn cmd_toy_test(ctx: &Context, name: &str) -> Result<PathBuf> {
    let c = &ctx.cfg;
    let m = Manifest::read(&c.paths.manifest())?;
    let out = c.paths.corpus.join(name);
    let mut w = csv::Writer::from_path(&out).map_err(|e| Error::Serde(format!("{}: {e}", out.display())))?;
    w.write_record(["test_name", "item_id", "condition", "subjective_score", "test_path", "reference_path", "subgroup"])?;
    let mut n = 0;
    for r in m.split(Split::Test).filter(|r| !r.is_clean()) {
        let mos = r
            .visqol_mos
            .ok_or_else(|| Error::Precondition(format!("{} is unlabeled; run `label` first", r.clip_path)))?;
        let Bitrate::Kbps(k) = r.bitrate_kbps else { continue };
        w.write_record([
            "toy",
            &r.clip_id,
            &format!("{}_{k}", r.codec),
            &mos.to_string(),
            &r.clip_path,
            &r.reference_path,
            r.codec.as_str(),
        ])?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    if n < 3 {
        return Err(Error::Precondition(format!("held-out split has only {n} coded records")));
    }
    log::info!("wrote {n} listening-test rows to {}", out.display());
    Ok(out)
}

fn load_mapping(cfg: &RunConfig) -> Result<Option<(DistanceMapping, String)>> {
    match &cfg.score.mapping {
        Some(p) => Ok(Some((DistanceMapping::load(p)?, sha256_file(p)?))),
        None => Ok(None),
    }
}

fn reference_set(cfg: &RunConfig, model: &EncoderModel, p: &mut Provenance) -> Result<ReferenceSet> {
    let list = cfg
        .score
        .reference_list
        .as_ref()
        .ok_or_else(|| Error::Config("non-matching scoring needs score.reference_list".into()))?;
    p.add_input(list)?;
    let refs = ReferenceSet::read_list(list)?
        .into_iter()
        .map(|path| Ok((path.display().to_string(), audio::read_wav(&path)?)))
        .collect::<Result<Vec<_>>>()?;
    ReferenceSet::embed(model, &refs)
}

pub fn cmd_score(ctx: &Context, args: &ScoreArgs) -> Result<Vec<PredictionRecord>> {
    let c = &ctx.cfg;
    let model = load_model(c)?;
    let mapping = load_mapping(c)?;
    let map = mapping.as_ref().map(|(m, _)| m);
    let mut p = ctx.provenance("score")?;
    p.artifacts.insert("checkpoint".into(), sha256_file(&c.checkpoint())?);
    if let Some((_, id)) = &mapping {
        p.artifacts.insert("mapping".into(), id.clone());
    }
    let nmr = match c.score.mode {
        crate::scorer::ScoreMode::NonMatching => Some(reference_set(c, &model, &mut p)?),
        crate::scorer::ScoreMode::FullReference => None,
    };
    let score_pair = |test: &Path, reference: &Path| -> Result<crate::scorer::QualityScore> {
        let t = audio::read_wav(test)?;
        match &nmr {
            Some(set) => score_non_matching(&model, &t, set, c.score.aggregation, map),
            None => score_full_reference(&model, &t, &audio::read_wav(reference)?, map),
        }
    };

    if let Some(test) = &args.test {
        let reference = args.reference.as_ref().expect("clap enforces --reference");
        let s = score_pair(test, reference)?;
        print_json(&s)?;
        return Ok(Vec::new());
    }
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("score needs --out for listening-test scoring".into()))?;
    let tests = ctx.tests(&args.tests)?;
    for t in args.tests.iter().chain(if args.tests.is_empty() { &c.evaluate.tests[..] } else { &[] }) {
        p.add_input(t)?;
    }
    let jobs: Vec<(&ListeningTestFile, &crate::evalreport::ListeningRow)> =
        tests.iter().flat_map(|t| t.rows.iter().map(move |r| (t, r))).collect();
    let rows = jobs
        .par_iter()
        .map(|(t, r)| {
            let s = score_pair(&r.test_path, &r.reference_path)
                .map_err(|e| Error::Validation(format!("{}:{}:{}: {e}", t.test_name, r.item_id, r.condition)))?;
            Ok(PredictionRecord {
                test_name: t.test_name.clone(),
                item_id: r.item_id.clone(),
                condition: r.condition.clone(),
                distance: s.distance,
                mapped_score: s.mapped_score,
                mode: s.mode,
                aggregation: s.aggregation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_predictions(out, &rows)?;
    p.artifacts.insert("predictions".into(), sha256_file(out)?);
    p.write(&sidecar(out))?;
    log::info!("scored {} rows into {}", rows.len(), out.display());
    Ok(rows)
}

pub fn cmd_fit_mapping(ctx: &Context, predictions: &Path, tests: &[PathBuf], out: &Path) -> Result<DistanceMapping> {
    let c = &ctx.cfg;
    let preds = read_predictions(predictions)?;
    let files = ctx.tests(tests)?;
    let mut by_key: HashMap<(&str, &str, &str), f64> = HashMap::new();
    for p in &preds {
        by_key.insert((&p.test_name, &p.item_id, &p.condition), p.distance);
    }
    let scale = c.evaluate.scale;
    let mut d = Vec::new();
    let mut y = Vec::new();
    let mut missing = Vec::new();
    for t in &files {
        if t.scale != scale {
            return Err(Error::Config("listening tests use different scales".into()));
        }
        for r in &t.rows {
            match by_key.get(&(t.test_name.as_str(), r.item_id.as_str(), r.condition.as_str())) {
                Some(v) => {
                    d.push(*v);
                    y.push(r.subjective_score);
                }
                None => missing.push(format!("{}:{}:{}", t.test_name, r.item_id, r.condition)),
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Coverage(missing));
    }
    let mlp = match c.mapping.kind {
        MappingKind::Cubic => None,
        MappingKind::Mlp => Some(&c.mapping.mlp),
    };
    let mut m = DistanceMapping::fit_distances(&d, &y, scale.bounds(), mlp)?;
    let mut p = ctx.provenance("fit-mapping")?;
    let ph = p.add_input(predictions)?;
    let mut th = Vec::new();
    for t in if tests.is_empty() { &c.evaluate.tests[..] } else { tests } {
        th.push(p.add_input(t)?);
    }
    m.calibration_hash = Some(crate::provenance::sha256_bytes(format!("{ph}:{}", th.join(":")).as_bytes()));
    m.save(out)?;
    p.artifacts.insert("mapping".into(), sha256_file(out)?);
    p.write(&sidecar(out))?;
    log::info!("fitted {} mapping on {} points, mse {:.4}", m.kind(), d.len(), m.fit_mse);
    Ok(m)
}

pub fn cmd_evaluate(
    ctx: &Context,
    predictions: &Path,
    tests: &[PathBuf],
    out: &Path,
    scatter: Option<&Path>,
) -> Result<CorrelationReport> {
    let c = &ctx.cfg;
    let preds = read_predictions(predictions)?;
    let files = ctx.tests(tests)?;
    let opts = EvalOptions {
        pool_conditions: c.evaluate.pool_conditions,
        subgroups: c.evaluate.subgroups.clone(),
    };
    let mut p = ctx.provenance("evaluate")?;
    let mut meta = ReportMetadata {
        predictions_hash: Some(p.add_input(predictions)?),
        config_hash: Some(p.config_hash.clone()),
        ..Default::default()
    };
    let score_prov = sidecar(predictions);
    if score_prov.exists() {
        let text = std::fs::read_to_string(&score_prov).map_err(|e| Error::io(&score_prov, e))?;
        let sp: Provenance = serde_json::from_str(&text)?;
        meta.checkpoint_hash = sp.artifacts.get("checkpoint").cloned();
        meta.mapping_id = sp.artifacts.get("mapping").cloned();
    }
    for t in if tests.is_empty() { &c.evaluate.tests[..] } else { tests } {
        p.add_input(t)?;
    }
    let report = evaluate(&preds, &files, &opts, meta)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (json, _) = report.write(out)?;
    if let Some(s) = scatter {
        export_scatter(&preds, &files, &opts, s)?;
        p.artifacts.insert("scatter".into(), sha256_file(s)?);
    }
    p.artifacts.insert("report".into(), sha256_file(&json)?);
    p.write(&sidecar(&json))?;
    Ok(report)
}

/// Outputs of [`cmd_demo`].
#[derive(Debug, Clone)]
pub struct DemoOutputs {
    pub manifest: PathBuf,
    pub train: TrainSummary,
    pub listening_test: PathBuf,
    pub predictions: PathBuf,
    pub report: CorrelationReport,
    pub report_path: PathBuf,
}

/// toy-sources, prepare, label, train, toy-test, score and evaluate in one go.
/// Needs a toy transcoder and a stub labeler.
pub fn cmd_demo(ctx: &Context) -> Result<DemoOutputs> {
    let c = &ctx.cfg;
    if !matches!(c.transcoder, TranscoderConfig::Toy(_)) || !matches!(c.labeler, LabelerConfig::Stub(_)) {
        return Err(Error::Config("demo needs transcoder.kind = \"toy\" and labeler.kind = \"stub\"".into()));
    }
    if !matches!(c.backbone, BackboneChoice::Toy { .. }) {
        log::warn!("demo with a pretrained backbone; this can be slow");
    }
    let mut ctx = ctx.clone();
    if ctx.cfg.evaluate.scale != Scale::Mos {
        ctx.cfg.evaluate.scale = Scale::Mos;
        ctx.overrides.push("evaluate.scale=mos".into());
        if let Some(echo) = &mut ctx.cfg.echo {
            echo["evaluate"]["scale"] = "mos".into();
        }
    }
    cmd_toy_sources(&ctx)?;
    cmd_prepare(&ctx)?;
    cmd_label(&ctx)?;
    let summary = cmd_train(&ctx)?;
    let lt = cmd_toy_test(&ctx, "listening_test.csv")?;
    let eval_dir = ctx.cfg.paths.run.join("eval");
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let predictions = eval_dir.join("predictions.csv");
    let tests = vec![lt.clone()];
    cmd_score(
        &ctx,
        &ScoreArgs { tests: tests.clone(), out: Some(predictions.clone()), test: None, reference: None },
    )?;
    let stem = eval_dir.join("report");
    let report = cmd_evaluate(&ctx, &predictions, &tests, &stem, Some(&eval_dir.join("scatter.csv")))?;
    Ok(DemoOutputs {
        manifest: ctx.cfg.paths.manifest(),
        train: summary,
        listening_test: lt,
        predictions,
        report,
        report_path: stem.with_extension("json"),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // fails only if a pool already exists, as in tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let ctx = Context::load(&cli.global)?;
    match &cli.command {
        Command::ToySources => {
            cmd_toy_sources(&ctx)?;
        }
        Command::Prepare => {
            let m = cmd_prepare(&ctx)?;
            println!("{} records", m.records.len());
        }
        Command::Label => print_json(&cmd_label(&ctx)?)?,
        Command::Train => print_json(&cmd_train(&ctx)?)?,
        Command::ToyTest { name } => println!("{}", cmd_toy_test(&ctx, name)?.display()),
        Command::Score(args) => {
            cmd_score(&ctx, args)?;
        }
        Command::FitMapping { predictions, tests, out } => {
            cmd_fit_mapping(&ctx, predictions, tests, out)?;
        }
        Command::Evaluate { predictions, tests, out, scatter } => {
            let r = cmd_evaluate(&ctx, predictions, tests, out, scatter.as_deref())?;
            print!("{}", r.to_text());
        }
        Command::Demo => {
            let d = cmd_demo(&ctx)?;
            print!("{}", d.report.to_text());
        }
    }
    Ok(())
}
