//! C ABI over the `aqlearn` library.
//!
//! Every fallible call returns an [`AqStatus`]; on failure the message is
//! available from [`aq_last_error`] on the same thread until the next call.
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use aqlearn::audio::AudioBuffer;
use aqlearn::encoder::{load_checkpoint, load_pretrained, Backbone, BackboneConfig, EncoderModel, PretrainedSource};
use aqlearn::scorer::{embed_channels, fad, score_full_reference, DistanceMapping};
use aqlearn::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AqStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    Checkpoint = 5,
    Format = 6,
    ExternalTool = 7,
    Panic = 8,
}

/// A trained (or frozen) encoder.
pub struct AqModel {
    inner: EncoderModel,
}

/// A fitted distance-to-score mapping.
pub struct AqMapping {
    inner: DistanceMapping,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AqStatus {
    match e {
        Error::Io { .. } | Error::Audio { .. } => AqStatus::Io,
        Error::Config(_)
        | Error::Validation(_)
        | Error::Precondition(_)
        | Error::Coverage(_)
        | Error::UndefinedCorrelation(_)
        | Error::Sampling(_) => AqStatus::InvalidArgument,
        Error::Numeric(_) | Error::Fit(_) | Error::Alignment { .. } => AqStatus::Numeric,
        Error::Checkpoint(_) => AqStatus::Checkpoint,
        Error::Serde(_) => AqStatus::Format,
        Error::ExternalTool { .. } | Error::Labeling(_) => AqStatus::ExternalTool,
    }
}

struct Failure(AqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AqStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AqStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AqStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AqStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn samples_arg<'a>(p: *const f32, n: usize, what: &str) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    if n == 0 {
        return Err(Failure(AqStatus::InvalidArgument, format!("{what} is empty")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn model_ref<'a>(m: *const AqModel) -> Result<&'a EncoderModel, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn finish_model(model: EncoderModel, out: *mut *mut AqModel) {
    *out = Box::into_raw(Box::new(AqModel { inner: model }));
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn aq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn aq_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}

/// Loads a checkpoint trained on the toy backbone with `backbone_seed`.
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aq_model_load_toy(
    backbone_seed: u64,
    checkpoint: *const c_char,
    out: *mut *mut AqModel,
) -> AqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(checkpoint, "checkpoint")?;
        let base = Backbone::random(BackboneConfig::toy(backbone_seed), backbone_seed)?;
        finish_model(load_checkpoint(&path, base)?, out);
        Ok(())
    })
}

/// Loads a checkpoint trained on the published backbone stored in `backbone_dir`.
///
/// # Safety
/// String arguments must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aq_model_load_pretrained(
    backbone_dir: *const c_char,
    revision: *const c_char,
    default_sample_rate: u32,
    checkpoint: *const c_char,
    out: *mut *mut AqModel,
) -> AqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(backbone_dir, "backbone_dir")?;
        let revision = path_arg(revision, "revision")?.display().to_string();
        let path = path_arg(checkpoint, "checkpoint")?;
        let base = load_pretrained(&PretrainedSource {
            dir,
            id: None,
            revision,
            default_sample_rate,
        })?;
        finish_model(load_checkpoint(&path, base)?, out);
        Ok(())
    })
}

/// # Safety
/// `model` must come from an `aq_model_load_*` call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aq_model_free(model: *mut AqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aq_model_embedding_dim(model: *const AqModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.embedding_dim())
}

/// Sample rate the model runs at, or 0 for a null handle. Inputs at other
/// rates are resampled.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aq_model_sample_rate(model: *const AqModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.sample_rate())
}

/// Embeds a mono signal into `out[0..out_len]`; `out_len` must equal
/// `aq_model_embedding_dim`.
///
/// # Safety
/// `samples` must hold `n` floats and `out` room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn aq_model_embed(
    model: *const AqModel,
    samples: *const f32,
    n: usize,
    sample_rate: u32,
    out: *mut f64,
    out_len: usize,
) -> AqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let s = samples_arg(samples, n, "samples")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != m.embedding_dim() {
            return Err(Failure(
                AqStatus::InvalidArgument,
                format!("out_len {out_len} != embedding dimension {}", m.embedding_dim()),
            ));
        }
        let e = embed_channels(m, &AudioBuffer::mono(s.to_vec(), sample_rate), "input")?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&e[0].vector);
        Ok(())
    })
}

/// Full-reference embedding distance between two mono signals at one rate.
///
/// # Safety
/// `test` and `reference` must hold `n_test` and `n_reference` floats;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aq_model_fr_distance(
    model: *const AqModel,
    test: *const f32,
    n_test: usize,
    reference: *const f32,
    n_reference: usize,
    sample_rate: u32,
    out: *mut f64,
) -> AqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let t = samples_arg(test, n_test, "test")?;
        let r = samples_arg(reference, n_reference, "reference")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = score_full_reference(
            m,
            &AudioBuffer::mono(t.to_vec(), sample_rate),
            &AudioBuffer::mono(r.to_vec(), sample_rate),
            None,
        )?;
        *out = s.distance;
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aq_mapping_load(path: *const c_char, out: *mut *mut AqMapping) -> AqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        *out = Box::into_raw(Box::new(AqMapping {
            inner: DistanceMapping::load(&p)?,
        }));
        Ok(())
    })
}

/// Maps a distance to a score on the mapping's scale.
///
/// # Safety
/// `mapping` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aq_mapping_apply(mapping: *const AqMapping, distance: f64, out: *mut f64) -> AqStatus {
    guard(|| {
        let m = mapping.as_ref().ok_or_else(|| null("mapping"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !distance.is_finite() {
            return Err(Failure(AqStatus::InvalidArgument, "distance is not finite".into()));
        }
        *out = m.inner.apply(distance);
        Ok(())
    })
}

/// # Safety
/// `mapping` must come from `aq_mapping_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aq_mapping_free(mapping: *mut AqMapping) {
    if !mapping.is_null() {
        drop(Box::from_raw(mapping));
    }
}

/// Fréchet distance between two embedding sets stored row-major as
/// `n_a x dim` and `n_b x dim`.
///
/// # Safety
/// `a` and `b` must hold `n_a * dim` and `n_b * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn aq_fad(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    out: *mut f64,
) -> AqStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("a, b or out"));
        }
        if dim == 0 {
            return Err(Failure(AqStatus::InvalidArgument, "dim is 0".into()));
        }
        let rows = |p: *const f64, n: usize| -> Vec<Vec<f64>> {
            std::slice::from_raw_parts(p, n * dim).chunks(dim).map(<[f64]>::to_vec).collect()
        };
        *out = fad(&rows(a, n_a), &rows(b, n_b))?;
        Ok(())
    })
}

unsafe fn correlation(
    x: *const f64,
    y: *const f64,
    n: usize,
    out: *mut f64,
    f: fn(&[f64], &[f64]) -> aqlearn::Result<f64>,
) -> AqStatus {
    guard(|| {
        if x.is_null() || y.is_null() || out.is_null() {
            return Err(null("x, y or out"));
        }
        *out = f(std::slice::from_raw_parts(x, n), std::slice::from_raw_parts(y, n))?;
        Ok(())
    })
}

/// Pearson correlation; `AQ_STATUS_INVALID_ARGUMENT` when undefined.
///
/// # Safety
/// `x` and `y` must hold `n` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aq_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> AqStatus {
    correlation(x, y, n, out, aqlearn::evalreport::pearson)
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// As [`aq_pearson`].
#[no_mangle]
pub unsafe extern "C" fn aq_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> AqStatus {
    correlation(x, y, n, out, aqlearn::evalreport::spearman)
}
