//! C ABI over the `intermpl` crate.
//!
//! Every function returns an [`ImplStatus`]. On failure a description is
//! kept per thread and can be read with [`impl_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use intermpl::ctc::{best_path_decode, ctc_loss, CtcError, Posteriorgram};
use intermpl::experiment::{load_checkpoint, ExperimentError};
use intermpl::metrics::{wer_recovery_rate, word_error_rate};
use intermpl::model::Model;
use intermpl::mpl::{Recognizer, TrainError};
use intermpl::nn::{Matrix, NnError, ParamSet};
use intermpl::vocab::{VocabError, VocabHierarchy};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Numeric = 5,
    Infeasible = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded checkpoint.
pub struct ImplModel {
    model: Model,
    params: ParamSet,
}

/// A loaded vocabulary hierarchy.
pub struct ImplVocab {
    vocab: VocabHierarchy,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(ImplStatus, String);

impl Failure {
    fn new(status: ImplStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<CtcError> for Failure {
    fn from(e: CtcError) -> Self {
        let status = match e {
            CtcError::Infeasible { .. } => ImplStatus::Infeasible,
            CtcError::InvalidPosteriorgram(_) => ImplStatus::Numeric,
            _ => ImplStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<VocabError> for Failure {
    fn from(e: VocabError) -> Self {
        let status = match e {
            VocabError::Io(_) => ImplStatus::Io,
            VocabError::Format(_) | VocabError::Config(_) => ImplStatus::Config,
            _ => ImplStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match &e {
            TrainError::NonFinite { .. } => ImplStatus::Numeric,
            TrainError::Vocab(_) => ImplStatus::InvalidArgument,
            _ => ImplStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let status = match &e {
            ExperimentError::MissingInput(_) | ExperimentError::Io(_) => ImplStatus::Io,
            ExperimentError::Train(TrainError::Model(intermpl::model::ModelError::Nn(NnError::Io(_)))) => {
                ImplStatus::Io
            }
            ExperimentError::Train(TrainError::Model(intermpl::model::ModelError::Nn(NnError::Format(_)))) => {
                ImplStatus::Config
            }
            _ => ImplStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

/// Run `f`, converting failures and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ImplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ImplStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ImplStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(ImplStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure::new(ImplStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(ImplStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn matrix_arg(data: *const f64, rows: usize, cols: usize) -> Result<Matrix, Failure> {
    non_null(data, "matrix data")?;
    if rows == 0 || cols == 0 {
        return Err(Failure::new(ImplStatus::InvalidArgument, "matrix dimensions must be positive"));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure::new(ImplStatus::InvalidArgument, "matrix too large"))?;
    Ok(Matrix::from_vec(rows, cols, std::slice::from_raw_parts(data, len).to_vec()))
}

/// Copy `s` plus a terminating NUL into `buf`. `required` receives the
/// needed size including the NUL, even when the buffer is too small.
unsafe fn write_string(s: &str, buf: *mut c_char, cap: usize, required: *mut usize) -> Result<(), Failure> {
    let bytes = s.as_bytes();
    if !required.is_null() {
        *required = bytes.len() + 1;
    }
    if buf.is_null() || cap < bytes.len() + 1 {
        return Err(Failure::new(
            ImplStatus::BufferTooSmall,
            format!("{} bytes needed", bytes.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Message describing the last failure on this thread. Empty after a
/// successful call. The pointer stays valid until the next call on the same
/// thread.
#[no_mangle]
pub extern "C" fn impl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn impl_model_load(path: *const c_char, out: *mut *mut ImplModel) -> ImplStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let (model, params) = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ImplModel { model, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`impl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn impl_model_free(model: *mut ImplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input feature dimension of the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn impl_model_feature_dim(model: *const ImplModel, out: *mut usize) -> ImplStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.config().feature_dim;
        Ok(())
    })
}

/// Number of CTC heads of the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn impl_model_num_heads(model: *const ImplModel, out: *mut usize) -> ImplStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.config().num_heads();
        Ok(())
    })
}

/// Load a vocabulary file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn impl_vocab_load(path: *const c_char, out: *mut *mut ImplVocab) -> ImplStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let vocab = VocabHierarchy::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ImplVocab { vocab }));
        Ok(())
    })
}

/// # Safety
/// `vocab` must come from [`impl_vocab_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn impl_vocab_free(vocab: *mut ImplVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Decode 1-based token ids at `level` into text.
///
/// # Safety
/// `ids` must point to `len` values; `buf` to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn impl_vocab_decode(
    vocab: *const ImplVocab,
    level: usize,
    ids: *const usize,
    len: usize,
    buf: *mut c_char,
    cap: usize,
    required: *mut usize,
) -> ImplStatus {
    guard(|| {
        non_null(vocab, "vocab")?;
        let ids = if len == 0 {
            &[][..]
        } else {
            non_null(ids, "ids")?;
            std::slice::from_raw_parts(ids, len)
        };
        let text = (*vocab).vocab.decode(ids, level)?;
        write_string(&text, buf, cap, required)
    })
}

/// Best-path transcript of a `frames x dim` row-major feature matrix.
///
/// # Safety
/// Handles must be live; `features` must point to `frames * dim` values and
/// `buf` to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn impl_transcribe(
    model: *const ImplModel,
    vocab: *const ImplVocab,
    features: *const f64,
    frames: usize,
    dim: usize,
    buf: *mut c_char,
    cap: usize,
    required: *mut usize,
) -> ImplStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(vocab, "vocab")?;
        let m = &*model;
        let rec = Recognizer::new(&m.model, &(*vocab).vocab)?;
        let x = matrix_arg(features, frames, dim)?;
        let text = rec.transcribe(&m.params, &x)?;
        write_string(&text, buf, cap, required)
    })
}

/// CTC loss of `target` under a `frames x width` log-probability matrix whose
/// column 0 is the blank.
///
/// # Safety
/// `log_probs` must point to `frames * width` values, `target` to
/// `target_len` values, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn impl_ctc_loss(
    log_probs: *const f64,
    frames: usize,
    width: usize,
    target: *const usize,
    target_len: usize,
    out: *mut f64,
) -> ImplStatus {
    guard(|| {
        non_null(out, "out")?;
        let post = Posteriorgram::new(matrix_arg(log_probs, frames, width)?, 0)?;
        let target = if target_len == 0 {
            &[][..]
        } else {
            non_null(target, "target")?;
            std::slice::from_raw_parts(target, target_len)
        };
        *out = ctc_loss(&post, target)?.loss;
        Ok(())
    })
}

/// Greedy best-path decode. `out_len` receives the label count, even when
/// `cap` is too small.
///
/// # Safety
/// `log_probs` must point to `frames * width` values, `labels` to `cap`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn impl_best_path(
    log_probs: *const f64,
    frames: usize,
    width: usize,
    labels: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> ImplStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let post = Posteriorgram::new(matrix_arg(log_probs, frames, width)?, 0)?;
        let decoded = best_path_decode(&post);
        *out_len = decoded.len();
        if decoded.len() > cap || (labels.is_null() && !decoded.is_empty()) {
            return Err(Failure::new(ImplStatus::BufferTooSmall, format!("{} labels", decoded.len())));
        }
        if !decoded.is_empty() {
            ptr::copy_nonoverlapping(decoded.as_ptr(), labels, decoded.len());
        }
        Ok(())
    })
}

/// Word error rate of whitespace-separated `hypothesis` against `reference`.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn impl_wer(hypothesis: *const c_char, reference: *const c_char, out: *mut f64) -> ImplStatus {
    guard(|| {
        non_null(out, "out")?;
        let hyp: Vec<&str> = str_arg(hypothesis, "hypothesis")?.split_whitespace().collect();
        let reference: Vec<&str> = str_arg(reference, "reference")?.split_whitespace().collect();
        *out = word_error_rate(&hyp, &reference)
            .map_err(|e| Failure::new(ImplStatus::InvalidArgument, e.to_string()))?
            .wer;
        Ok(())
    })
}

/// WER recovery rate in percent.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn impl_wrr(seed_wer: f64, model_wer: f64, oracle_wer: f64, out: *mut f64) -> ImplStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = wer_recovery_rate(seed_wer, model_wer, oracle_wer)
            .map_err(|e| Failure::new(ImplStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}
