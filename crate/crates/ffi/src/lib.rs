//! C ABI over the `prism` library.
//!
//! Conventions:
//! - Every fallible function returns a [`PrismStatus`]; on failure a
//!   message is kept per thread and read with [`prism_last_error`].
//! - Objects are opaque handles created by `*_new` / `*_load` / `*_init`
//!   and released by the matching `*_free`, which accepts NULL.
//! - Output buffers are caller-owned. When a buffer is too small the call
//!   fails with `PRISM_STATUS_BUFFER_TOO_SMALL` and writes nothing.
//! - Panics never cross the boundary; they surface as `PRISM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::Array2;
use prism::adaptation::{balanced_accuracy, Classifier};
use prism::cli::{self, Cli, Command};
use prism::model::{Checkpoint, CheckpointKind, Model, ModelConfig, Sample};
use prism::recording::{load_recording, save_recording, MontageMap, Recording};
use prism::signal::{preprocess, PipelineConfig};
use prism::tokenizer::patchify;
use prism::Error;

/// Result of every fallible call. Category codes match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrismStatus {
    Ok = 0,
    /// Error outside the categories below.
    Other = 1,
    /// A required pointer argument was NULL.
    NullPointer = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Input = 6,
    Numeric = 7,
    Checkpoint = 8,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl PrismStatus {
    fn from_category(category: &str) -> Self {
        match category {
            "io" => Self::Io,
            "format" => Self::Format,
            "config" => Self::Config,
            "input" => Self::Input,
            "numeric" => Self::Numeric,
            "checkpoint" => Self::Checkpoint,
            _ => Self::Other,
        }
    }
}

/// A multichannel recording.
pub struct PrismRecording {
    inner: Recording,
}

/// A pretrained (or adapted) backbone.
pub struct PrismModel {
    inner: Model,
}

/// A backbone with a classification head.
pub struct PrismClassifier {
    inner: Classifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PrismStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(PrismStatus::from_category(e.category()), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

/// Run `f`, record any failure and convert it to a status.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> PrismStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PrismStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PrismStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(PrismStatus::NullPointer, format!("{name} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PrismStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn obj<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(name))
}

fn parse_toml<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> FfiResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => toml::from_str(t).map_err(|e| Failure(PrismStatus::Config, e.to_string())),
    }
}

unsafe fn fill(buf: *mut f64, len: usize, data: &[f64]) -> FfiResult<()> {
    if data.len() > len {
        return Err(Failure(
            PrismStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", data.len()),
        ));
    }
    if data.is_empty() {
        return Ok(());
    }
    if buf.is_null() {
        return Err(null("buffer"));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prism_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn prism_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Build a recording from a row-major `n_channels × n_samples` signal.
/// A negative `label` means unlabeled.
///
/// # Safety
/// `channels` points to `n_channels` NUL-terminated strings and `signal` to
/// `n_channels * n_samples` doubles.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_new(
    subject_id: *const c_char,
    channels: *const *const c_char,
    n_channels: usize,
    sample_rate_hz: f64,
    signal: *const f64,
    n_samples: usize,
    label: i64,
    out: *mut *mut PrismRecording,
) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let subject = str_arg(subject_id, "subject_id")?;
        if channels.is_null() || signal.is_null() {
            return Err(null("channels or signal"));
        }
        let names = (0..n_channels)
            .map(|i| str_arg(*channels.add(i), "channel name").map(str::to_string))
            .collect::<FfiResult<Vec<_>>>()?;
        let len = n_channels
            .checked_mul(n_samples)
            .ok_or_else(|| Failure(PrismStatus::Input, "signal size overflows".into()))?;
        let data = std::slice::from_raw_parts(signal, len).to_vec();
        let arr = Array2::from_shape_vec((n_channels, n_samples), data)
            .map_err(|e| Failure(PrismStatus::Input, e.to_string()))?;
        let label = usize::try_from(label).ok();
        let rec = Recording::new(subject, names, sample_rate_hz, arr, label, "ffi")?;
        *out = boxed(PrismRecording { inner: rec });
        Ok(())
    })
}

/// Load a recording directory, canonicalizing channel names.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_load(dir: *const c_char, out: *mut *mut PrismRecording) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let loaded = load_recording(&PathBuf::from(str_arg(dir, "dir")?))?;
        *out = boxed(PrismRecording {
            inner: loaded.recording,
        });
        Ok(())
    })
}

/// # Safety
/// `rec` is a live handle; `dir` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_save(rec: *const PrismRecording, dir: *const c_char) -> PrismStatus {
    guard(|| {
        let rec = obj(rec, "rec")?;
        save_recording(&rec.inner, &PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `rec` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_n_channels(rec: *const PrismRecording) -> usize {
    rec.as_ref().map_or(0, |r| r.inner.n_channels())
}

/// # Safety
/// `rec` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_n_samples(rec: *const PrismRecording) -> usize {
    rec.as_ref().map_or(0, |r| r.inner.n_samples())
}

/// # Safety
/// `rec` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_sample_rate(rec: *const PrismRecording) -> f64 {
    rec.as_ref().map_or(0.0, |r| r.inner.sample_rate_hz)
}

/// Copy the signal, row-major, into `buf` of `len` doubles.
///
/// # Safety
/// `rec` is a live handle; `buf` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_copy_signal(rec: *const PrismRecording, buf: *mut f64, len: usize) -> PrismStatus {
    guard(|| {
        let rec = obj(rec, "rec")?;
        let data: Vec<f64> = rec.inner.signal.iter().copied().collect();
        fill(buf, len, &data)
    })
}

/// # Safety
/// `rec` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prism_recording_free(rec: *mut PrismRecording) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Resample, filter, normalize and clip. `pipeline_toml` holds pipeline
/// settings; NULL selects the defaults.
///
/// # Safety
/// `rec` is a live handle; `pipeline_toml` is NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn prism_preprocess(
    rec: *const PrismRecording,
    pipeline_toml: *const c_char,
    out: *mut *mut PrismRecording,
) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let rec = obj(rec, "rec")?;
        let cfg: PipelineConfig = parse_toml(opt_str_arg(pipeline_toml, "pipeline_toml")?)?;
        let (clean, _) = preprocess(&rec.inner, &cfg)?;
        *out = boxed(PrismRecording { inner: clean });
        Ok(())
    })
}

/// Freshly initialized backbone. `model_toml` holds model settings; NULL
/// selects the desk-scale defaults.
///
/// # Safety
/// `model_toml` is NULL or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prism_model_init(model_toml: *const c_char, seed: u64, out: *mut *mut PrismModel) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg: ModelConfig = parse_toml(opt_str_arg(model_toml, "model_toml")?)?;
        *out = boxed(PrismModel {
            inner: Model::init(cfg, seed)?,
        });
        Ok(())
    })
}

/// Backbone of any checkpoint (pretraining or adapted).
///
/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prism_model_load(path: *const c_char, out: *mut *mut PrismModel) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = boxed(PrismModel { inner: ck.model()? });
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_model_dim(model: *const PrismModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.dim)
}

fn sample_of(model: &Model, rec: &Recording) -> FfiResult<Sample> {
    let grid = patchify(rec, &model.config.tokenizer(), &MontageMap::standard_1020())?;
    Ok(Sample::from_grid(&grid))
}

/// Number of tokens `rec` yields under the model's tokenizer.
///
/// # Safety
/// `model` and `rec` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prism_model_n_tokens(
    model: *const PrismModel,
    rec: *const PrismRecording,
    out: *mut usize,
) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = obj(model, "model")?;
        *out = sample_of(&model.inner, &obj(rec, "rec")?.inner)?.n_tokens();
        Ok(())
    })
}

/// Encoder representations of every token, row-major `n_tokens × dim`.
///
/// # Safety
/// `model` and `rec` are live handles; `buf` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prism_model_encode(
    model: *const PrismModel,
    rec: *const PrismRecording,
    buf: *mut f64,
    len: usize,
) -> PrismStatus {
    guard(|| {
        let model = obj(model, "model")?;
        let sample = sample_of(&model.inner, &obj(rec, "rec")?.inner)?;
        let reps = model.inner.encode(&sample)?;
        fill(buf, len, &reps.iter().copied().collect::<Vec<_>>())
    })
}

/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prism_model_free(model: *mut PrismModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Load an adapted checkpoint as a classifier.
///
/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prism_classifier_load(path: *const c_char, out: *mut *mut PrismClassifier) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        if ck.kind != CheckpointKind::Adapted {
            return Err(Failure(PrismStatus::Checkpoint, "not an adapted checkpoint".into()));
        }
        *out = boxed(PrismClassifier {
            inner: Classifier::from_checkpoint(&ck)?,
        });
        Ok(())
    })
}

/// # Safety
/// `clf` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prism_classifier_classes(clf: *const PrismClassifier) -> usize {
    clf.as_ref().map_or(0, |c| c.inner.head.classes)
}

/// Class logits of one segment into `buf` of `len` doubles.
///
/// # Safety
/// `clf` and `rec` are live handles; `buf` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prism_classifier_logits(
    clf: *const PrismClassifier,
    rec: *const PrismRecording,
    buf: *mut f64,
    len: usize,
) -> PrismStatus {
    guard(|| {
        let clf = obj(clf, "clf")?;
        let sample = sample_of(&clf.inner.model, &obj(rec, "rec")?.inner)?;
        fill(buf, len, &clf.inner.logits(&sample)?)
    })
}

/// Predicted class of one segment.
///
/// # Safety
/// `clf` and `rec` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prism_classifier_predict(
    clf: *const PrismClassifier,
    rec: *const PrismRecording,
    out: *mut usize,
) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let clf = obj(clf, "clf")?;
        let sample = sample_of(&clf.inner.model, &obj(rec, "rec")?.inner)?;
        *out = clf.inner.predict(&sample)?;
        Ok(())
    })
}

/// # Safety
/// `clf` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prism_classifier_free(clf: *mut PrismClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// Mean per-class recall over the classes present in `labels`.
///
/// # Safety
/// `predictions` and `labels` hold `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn prism_balanced_accuracy(
    predictions: *const usize,
    labels: *const usize,
    n: usize,
    out: *mut f64,
) -> PrismStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if n > 0 && (predictions.is_null() || labels.is_null()) {
            return Err(null("predictions or labels"));
        }
        let (p, y): (&[usize], &[usize]) = if n == 0 {
            (&[], &[])
        } else {
            (std::slice::from_raw_parts(predictions, n), std::slice::from_raw_parts(labels, n))
        };
        *out = balanced_accuracy(p, y)?;
        Ok(())
    })
}

/// Run a CLI subcommand (`synth`, `preprocess`, `pretrain`, `adapt`,
/// `eval`, `sweep`, `report`) with `config_path` (NULL for defaults).
/// Progress lines go to standard output.
///
/// # Safety
/// `config_path` is NULL or NUL-terminated; `command` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn prism_run(config_path: *const c_char, command: *const c_char) -> PrismStatus {
    guard(|| {
        let config = opt_str_arg(config_path, "config_path")?.map(PathBuf::from);
        let command = match str_arg(command, "command")? {
            "synth" => Command::Synth,
            "preprocess" => Command::Preprocess,
            "pretrain" => Command::Pretrain,
            "adapt" => Command::Adapt,
            "eval" => Command::Eval,
            "sweep" => Command::Sweep,
            "report" => Command::Report,
            other => return Err(Failure(PrismStatus::Config, format!("unknown command {other:?}"))),
        };
        let args = Cli {
            config,
            seed: None,
            output: None,
            resume: false,
            preset: None,
            checkpoint: None,
            stop_after: None,
            command,
        };
        cli::run(&args, &mut std::io::stdout().lock())?;
        Ok(())
    })
}
