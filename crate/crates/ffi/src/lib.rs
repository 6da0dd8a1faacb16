//! C ABI over [`slm_core::predict::Predictor`].
//!
//! Every fallible call returns an [`SlmStatus`]. On failure the message is
//! kept per thread and can be read with [`slm_last_error`]. Handles are
//! opaque; free them with [`slm_predictor_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use slm_core::predict::Predictor;
use slm_core::SlmError;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlmStatus {
    SlmOk = 0,
    /// Bad input data, e.g. a sentence without tokens.
    SlmErrData = 1,
    /// A precondition of the call was violated.
    SlmErrContract = 2,
    /// A checkpoint or vocabulary file is malformed.
    SlmErrFormat = 3,
    SlmErrConfig = 4,
    SlmErrIo = 5,
    /// A required pointer was null.
    SlmErrNull = 6,
    /// A string argument is not valid UTF-8.
    SlmErrUtf8 = 7,
    /// An output buffer is too small.
    SlmErrBuffer = 8,
    /// Internal failure; the message says more.
    SlmErrInternal = 9,
}

impl From<&SlmError> for SlmStatus {
    fn from(e: &SlmError) -> Self {
        match e {
            SlmError::Data(_) => SlmStatus::SlmErrData,
            SlmError::Format(_) | SlmError::MissingTensors(_) => SlmStatus::SlmErrFormat,
            SlmError::Config(_) => SlmStatus::SlmErrConfig,
            SlmError::Io { .. } => SlmStatus::SlmErrIo,
            SlmError::Contract(_) | SlmError::Dimension { .. } | SlmError::Index { .. } => SlmStatus::SlmErrContract,
            SlmError::NonFinite { .. } | SlmError::Abort(_) => SlmStatus::SlmErrInternal,
        }
    }
}

/// Opaque predictor handle.
pub struct SlmPredictor {
    inner: Predictor,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: SlmStatus, msg: impl Into<String>) -> SlmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> SlmStatus) -> SlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SlmStatus::SlmErrInternal, "panic inside slm"),
    }
}

unsafe fn utf8<'a>(p: *const c_char, what: &str) -> Result<&'a str, SlmStatus> {
    if p.is_null() {
        return Err(fail(SlmStatus::SlmErrNull, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SlmStatus::SlmErrUtf8, format!("{what} is not UTF-8")))
}

unsafe fn read_sentences<'a>(p: *const *const c_char, n: usize) -> Result<Vec<&'a str>, SlmStatus> {
    if p.is_null() {
        return Err(fail(SlmStatus::SlmErrNull, "sentences is null"));
    }
    (0..n).map(|i| utf8(*p.add(i), &format!("sentence {i}"))).collect()
}

fn core_err(e: SlmError) -> SlmStatus {
    fail(SlmStatus::from(&e), e.to_string())
}

/// Loads a checkpoint and vocabulary. On success `*out` owns a new handle.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slm_predictor_open(
    checkpoint: *const c_char,
    vocab: *const c_char,
    out: *mut *mut SlmPredictor,
) -> SlmStatus {
    guard(|| {
        if out.is_null() {
            return fail(SlmStatus::SlmErrNull, "out is null");
        }
        *out = ptr::null_mut();
        let (ck, vp) = match (utf8(checkpoint, "checkpoint"), utf8(vocab, "vocab")) {
            (Ok(c), Ok(v)) => (c, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match Predictor::load(Path::new(ck), Path::new(vp)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SlmPredictor { inner }));
                SlmStatus::SlmOk
            }
            Err(e) => core_err(e),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `p` must come from [`slm_predictor_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slm_predictor_free(p: *mut SlmPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Width of each sentence embedding; 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slm_predictor_hidden(p: *const SlmPredictor) -> usize {
    p.as_ref().map_or(0, |p| p.inner.hidden())
}

/// Most sentences one call accepts; 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slm_predictor_max_sentences(p: *const SlmPredictor) -> usize {
    p.as_ref().map_or(0, |p| p.inner.config.max_sentences)
}

/// Greedy reconstruction of the original order of `n` sentences.
/// `order_out[k]` receives the input index of the sentence placed `k`-th.
///
/// # Safety
/// `sentences` must hold `n` NUL-terminated strings and `order_out` room
/// for `n` values.
#[no_mangle]
pub unsafe extern "C" fn slm_unshuffle(
    p: *const SlmPredictor,
    sentences: *const *const c_char,
    n: usize,
    order_out: *mut usize,
) -> SlmStatus {
    guard(|| {
        let Some(p) = p.as_ref() else {
            return fail(SlmStatus::SlmErrNull, "predictor is null");
        };
        if order_out.is_null() {
            return fail(SlmStatus::SlmErrNull, "order_out is null");
        }
        let s = match read_sentences(sentences, n) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match p.inner.unshuffle(&s) {
            Ok(order) => {
                ptr::copy_nonoverlapping(order.as_ptr(), order_out, order.len());
                SlmStatus::SlmOk
            }
            Err(e) => core_err(e),
        }
    })
}

/// Writes `n * hidden` floats, one `[SENT]` row per sentence, into `out`.
///
/// # Safety
/// `sentences` must hold `n` NUL-terminated strings and `out` room for
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn slm_sentence_embeddings(
    p: *const SlmPredictor,
    sentences: *const *const c_char,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> SlmStatus {
    guard(|| {
        let Some(p) = p.as_ref() else {
            return fail(SlmStatus::SlmErrNull, "predictor is null");
        };
        if out.is_null() {
            return fail(SlmStatus::SlmErrNull, "out is null");
        }
        let need = n.saturating_mul(p.inner.hidden());
        if out_len < need {
            return fail(SlmStatus::SlmErrBuffer, format!("need {need} floats, got {out_len}"));
        }
        let s = match read_sentences(sentences, n) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match p.inner.sentence_embeddings(&s) {
            Ok(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    ptr::copy_nonoverlapping(r.as_ptr(), out.add(i * r.len()), r.len());
                }
                SlmStatus::SlmOk
            }
            Err(e) => core_err(e),
        }
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// without the terminator.
///
/// # Safety
/// `buf` must be null or writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn slm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
