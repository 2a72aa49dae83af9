use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use aqlearn::audio::{read_wav, AudioBuffer};
use aqlearn::cli::{self, Context, GlobalArgs, ScoreArgs};
use aqlearn::corpus::{Bitrate, Manifest, Split};
use aqlearn::encoder::{AdaptationMode, EncoderModel};
use aqlearn::evalreport::spearman;
use aqlearn::provenance::Provenance;
use aqlearn::scorer::{read_predictions, score_full_reference};
use aqlearn::Error;

const SMALL: &str = r#"seed = 11
[paths]
sources = "sources"
corpus = "corpus"
run = "run"
[toy]
num_sources = 16
seconds = 1.0
sample_rate = 8000
[corpus]
clip_seconds = 0.25
target_rate = 8000
ladder = [16, 32, 48, 64, 80]
split_fractions = { train = 0.5, val = 0.25, test = 0.25 }
[backbone]
kind = "toy"
seed = 3
[train]
max_epochs = 8
batch_size = 16
initial_lr = 0.003
embedding_dim = 8
[evaluate]
scale = "mos"
subgroups = ["opus", "aac", "mp3"]
"#;

struct Demo {
    root: PathBuf,
    config: PathBuf,
    out: cli::DemoOutputs,
}

fn write_config(root: &Path) -> PathBuf {
    let config = root.join("run.toml");
    std::fs::write(&config, SMALL).unwrap();
    config
}

fn ctx(config: &Path, overrides: &[&str]) -> Context {
    Context::load(&GlobalArgs {
        config: Some(config.to_path_buf()),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    })
    .unwrap()
}

/// One small demo run shared by the tests that only read its outputs.
fn demo() -> &'static Demo {
    static DEMO: OnceLock<Demo> = OnceLock::new();
    DEMO.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let config = write_config(&root);
        let out = cli::cmd_demo(&ctx(&config, &[])).unwrap();
        Demo { root, config, out }
    })
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aqlearn"))
}

#[test]
fn demo_report_has_overall_and_codec_rows() {
    let d = demo();
    let names: Vec<&str> = d.out.report.rows.iter().map(|r| r.subgroup.as_str()).collect();
    assert_eq!(names, ["overall", "aac", "mp3", "opus"]);
    let overall = d.out.report.row("toy", "overall").unwrap();
    assert!(overall.srcc.unwrap() > 0.5, "{overall:?}");
    assert!(d.out.report.metadata.checkpoint_hash.is_some());
    assert!(d.root.join("run/eval/report.txt").exists());
    assert!(d.root.join("run/eval/scatter_regression.csv").exists());
}

#[test]
fn golden_toy_report() {
    let d = demo();
    let got = std::fs::read_to_string(d.root.join("run/eval/report.txt")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_report.txt");
    if std::env::var_os("AQLEARN_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &got).unwrap();
    }
    let want = std::fs::read_to_string(&golden).expect("golden report missing; rerun with AQLEARN_BLESS=1");
    assert_eq!(got, want);
}

#[test]
fn provenance_echoes_overrides_and_inputs() {
    let d = demo();
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.csv");
    let c = ctx(&d.config, &["score.aggregation=mean_distance", "evaluate.pool_conditions=true"]);
    cli::cmd_score(&c, &ScoreArgs { tests: vec![d.out.listening_test.clone()], out: Some(preds.clone()), test: None, reference: None })
        .unwrap();
    let text = std::fs::read_to_string(dir.path().join("preds.csv.provenance.json")).unwrap();
    let p: Provenance = serde_json::from_str(&text).unwrap();
    assert_eq!(p.command, "score");
    assert_eq!(p.overrides, ["score.aggregation=mean_distance", "evaluate.pool_conditions=true"]);
    assert_eq!(p.config["evaluate"]["pool_conditions"], true);
    assert!(p.artifacts.contains_key("checkpoint"));
    assert!(!p.inputs.is_empty());

    // identical scores to the demo's own predictions
    assert_eq!(std::fs::read(&preds).unwrap(), std::fs::read(&d.out.predictions).unwrap());
}

#[test]
fn fitted_mapping_is_applied_when_scoring() {
    let d = demo();
    let dir = tempfile::tempdir().unwrap();
    let mapping = dir.path().join("mapping.json");
    let c = ctx(&d.config, &[]);
    cli::cmd_fit_mapping(&c, &d.out.predictions, std::slice::from_ref(&d.out.listening_test), &mapping).unwrap();
    let preds = dir.path().join("mapped.csv");
    let m = mapping.display().to_string();
    let c = ctx(&d.config, &[&format!("score.mapping={m}")]);
    let rows = cli::cmd_score(
        &c,
        &ScoreArgs { tests: vec![d.out.listening_test.clone()], out: Some(preds.clone()), test: None, reference: None },
    )
    .unwrap();
    assert!(rows.iter().all(|r| r.mapped_score.is_some_and(|s| (1.0..=5.0).contains(&s))));
    let rep = cli::cmd_evaluate(&c, &preds, std::slice::from_ref(&d.out.listening_test), &dir.path().join("rep"), None)
        .unwrap();
    assert!(rep.metadata.mapping_id.is_some());
    assert!(rep.row("toy", "overall").unwrap().pcc.is_some());
}

#[test]
fn non_matching_scoring_uses_a_reference_list() {
    let d = demo();
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::read(&d.out.manifest).unwrap();
    let list = dir.path().join("refs.txt");
    let lines: Vec<String> = m
        .split(Split::Train)
        .filter(|r| r.is_clean())
        .map(|r| m.resolve(&r.clip_path).display().to_string())
        .collect();
    std::fs::write(&list, lines.join("\n")).unwrap();
    let c = ctx(&d.config, &["score.mode=non_matching", &format!("score.reference_list={}", list.display())]);
    let preds = dir.path().join("nmr.csv");
    let rows = cli::cmd_score(
        &c,
        &ScoreArgs { tests: vec![d.out.listening_test.clone()], out: Some(preds.clone()), test: None, reference: None },
    )
    .unwrap();
    assert!(rows.iter().all(|r| r.distance.is_finite() && r.distance >= 0.0));
    assert_eq!(read_predictions(&preds).unwrap().len(), rows.len());
}

#[test]
fn binary_reports_config_errors_with_exit_code_one() {
    let d = demo();
    let out = bin()
        .args(["--config", d.config.to_str().unwrap(), "--set", "train.no_such_key=1", "train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn binary_evaluate_prints_report() {
    let d = demo();
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--config", d.config.to_str().unwrap(), "evaluate", "--predictions"])
        .arg(&d.out.predictions)
        .arg("--tests")
        .arg(&d.out.listening_test)
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overall"));
    assert!(dir.path().join("r.json").exists() && dir.path().join("r.txt").exists());
}

#[test]
fn missing_predictions_are_a_coverage_error() {
    let d = demo();
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(&d.out.predictions).unwrap();
    let short: Vec<&str> = text.lines().take(text.lines().count() - 2).collect();
    let preds = dir.path().join("short.csv");
    std::fs::write(&preds, short.join("\n") + "\n").unwrap();
    let c = ctx(&d.config, &[]);
    let err = cli::cmd_evaluate(&c, &preds, std::slice::from_ref(&d.out.listening_test), &dir.path().join("r"), None)
        .unwrap_err();
    assert!(matches!(err, Error::Coverage(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn held_lock_blocks_prepare() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = ctx(&config, &[]);
    cli::cmd_toy_sources(&c).unwrap();
    let _held = cli::lock_tree(&c.cfg.paths.corpus).unwrap();
    let err = cli::cmd_prepare(&c).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

fn fr_distances(model: &EncoderModel, m: &Manifest) -> (Vec<f64>, Vec<f64>) {
    let mut d = Vec::new();
    let mut kbps = Vec::new();
    for r in m.split(Split::Test).filter(|r| !r.is_clean()) {
        let test = read_wav(&m.resolve(&r.clip_path)).unwrap();
        let reference = read_wav(&m.resolve(&r.reference_path)).unwrap();
        d.push(score_full_reference(model, &test, &reference, None).unwrap().distance);
        let Bitrate::Kbps(k) = r.bitrate_kbps else { unreachable!() };
        kbps.push(-f64::from(k));
    }
    (d, kbps)
}

#[test]
fn trained_encoder_beats_frozen_initialisation() {
    let d = demo();
    let c = ctx(&d.config, &[]);
    let m = Manifest::read(&d.out.manifest).unwrap();
    let trained = cli::load_model(&c.cfg).unwrap();
    let backbone = c.cfg.backbone.load().unwrap();
    let frozen = EncoderModel::new(backbone, 8, AdaptationMode::Lora, Some(&c.cfg.train.lora), c.cfg.seed).unwrap();
    let (dt, k) = fr_distances(&trained, &m);
    let (df, _) = fr_distances(&frozen, &m);
    let (st, sf) = (spearman(&dt, &k).unwrap(), spearman(&df, &k).unwrap());
    assert!(st > sf, "trained {st} vs frozen {sf}");
}

#[test]
fn dither_moves_embeddings_less_than_coding() {
    let d = demo();
    let c = ctx(&d.config, &[]);
    let model = cli::load_model(&c.cfg).unwrap();
    let m = Manifest::read(&d.out.manifest).unwrap();
    let (coded, _) = fr_distances(&model, &m);
    let mut sorted = coded.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut state = 0x2545_f491u32;
    for r in m.split(Split::Test).filter(|r| r.is_clean()) {
        let reference = read_wav(&m.resolve(&r.clip_path)).unwrap();
        // triangular dither at about 16-bit LSB scale
        let samples: Vec<f32> = reference
            .downmix()
            .iter()
            .map(|s| {
                state ^= state << 13;
                state ^= state >> 17;
                state ^= state << 5;
                let u = (state as f32 / u32::MAX as f32) - (state.rotate_left(7) as f32 / u32::MAX as f32);
                s + u / 32768.0
            })
            .collect();
        let dithered = AudioBuffer::mono(samples, reference.sample_rate);
        let dist = score_full_reference(&model, &dithered, &reference, None).unwrap().distance;
        assert!(dist < 0.5 * median, "dither distance {dist} vs coded median {median}");
    }
}
