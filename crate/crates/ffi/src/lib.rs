//! C ABI over the dialeval library.
//!
//! Every fallible function returns a [`DialevalStatus`] and writes its result through an out pointer.
//! After a non-OK status, `dialeval_last_error` gives a description for the calling thread.
//! Handles are opaque and must be released with their `_free` function.
//! Strings returned by the library are released with `dialeval_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dialeval::embeddings::WordVectorTable;
use dialeval::hybrid::{stats, HybridModel};
use dialeval::metrics::{word_coherence, EmbeddingMetric, MetricVector, FEATURE_COUNT};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DialevalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    /// The quantity is undefined for this input (zero vectors, no known tokens, zero variance).
    Undefined = 6,
    Panic = 7,
}

/// Number of features a hybrid model expects, in the library's canonical order.
pub const DIALEVAL_FEATURE_COUNT: usize = 11;
const _: () = assert!(DIALEVAL_FEATURE_COUNT == FEATURE_COUNT);

/// `dialeval_word_coherence` kinds.
pub const DIALEVAL_COHERENCE_AVG: u32 = 0;
pub const DIALEVAL_COHERENCE_EXT: u32 = 1;
pub const DIALEVAL_COHERENCE_GRD: u32 = 2;

/// Loaded word vectors.
pub struct DialevalWordVectors(WordVectorTable);

/// A fitted hybrid quality model.
pub struct DialevalHybridModel(HybridModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(DialevalStatus, String);

impl Failure {
    fn new(status: DialevalStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DialevalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DialevalStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside dialeval");
            DialevalStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(DialevalStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(DialevalStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(DialevalStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(DialevalStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn stats_failure(e: stats::StatsError) -> Failure {
    let status = match e {
        stats::StatsError::ZeroVariance => DialevalStatus::Undefined,
        _ => DialevalStatus::InvalidArgument,
    };
    Failure::new(status, e.to_string())
}

/// The calling thread's last error message, or NULL. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dialeval_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dialeval_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dialeval_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a whitespace-separated word vector file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dialeval_word_vectors_load(path: *const c_char, out: *mut *mut DialevalWordVectors) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let table = WordVectorTable::load(path).map_err(|e| Failure::new(DialevalStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(DialevalWordVectors(table)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from `dialeval_word_vectors_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dialeval_word_vectors_free(h: *mut DialevalWordVectors) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Vector dimension of a loaded table.
///
/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dialeval_word_vectors_dim(h: *const DialevalWordVectors, out: *mut usize) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let h = h.as_ref().ok_or_else(|| Failure::new(DialevalStatus::NullPointer, "handle is null"))?;
        *out = h.0.dimension();
        Ok(())
    })
}

/// Embedding coherence between a query and a response. `kind` is one of the `DIALEVAL_COHERENCE_*` values.
///
/// # Safety
/// `h` must be a live handle, the strings NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dialeval_word_coherence(
    h: *const DialevalWordVectors,
    kind: u32,
    query: *const c_char,
    response: *const c_char,
    out: *mut f64,
) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let h = h.as_ref().ok_or_else(|| Failure::new(DialevalStatus::NullPointer, "handle is null"))?;
        let kind = match kind {
            DIALEVAL_COHERENCE_AVG => EmbeddingMetric::Avg,
            DIALEVAL_COHERENCE_EXT => EmbeddingMetric::Ext,
            DIALEVAL_COHERENCE_GRD => EmbeddingMetric::Grd,
            other => return Err(Failure::new(DialevalStatus::InvalidArgument, format!("unknown coherence kind {other}"))),
        };
        let query = str_arg(query, "query")?;
        let response = str_arg(response, "response")?;
        *out = word_coherence(kind, query, response, &h.0).map_err(|e| {
            let status = if e.is_undefined() {
                DialevalStatus::Undefined
            } else {
                DialevalStatus::InvalidArgument
            };
            Failure::new(status, e.to_string())
        })?;
        Ok(())
    })
}

/// Loads a model written by `dialeval hybrid fit`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dialeval_hybrid_model_load(path: *const c_char, out: *mut *mut DialevalHybridModel) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let model = HybridModel::load(path).map_err(|e| {
            let status = match e {
                dialeval::hybrid::HybridError::Io(_) => DialevalStatus::Io,
                _ => DialevalStatus::Format,
            };
            Failure::new(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(DialevalHybridModel(model)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from `dialeval_hybrid_model_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dialeval_hybrid_model_free(h: *mut DialevalHybridModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Predicted quality for one conversation. `features` holds `DIALEVAL_FEATURE_COUNT` values;
/// NaN marks a missing value, which is imputed.
///
/// # Safety
/// `h` must be a live handle, `features` must point to `len` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dialeval_hybrid_model_predict(
    h: *const DialevalHybridModel,
    features: *const f64,
    len: usize,
    out: *mut f64,
) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let h = h.as_ref().ok_or_else(|| Failure::new(DialevalStatus::NullPointer, "handle is null"))?;
        if len != FEATURE_COUNT {
            return Err(Failure::new(
                DialevalStatus::InvalidArgument,
                format!("expected {FEATURE_COUNT} features, got {len}"),
            ));
        }
        let values = slice_arg(features, len, "features")?;
        let mut a = [None; FEATURE_COUNT];
        for (slot, v) in a.iter_mut().zip(values) {
            *slot = (!v.is_nan()).then_some(*v);
        }
        *out = h.0.predict(&MetricVector::from_array(a));
        Ok(())
    })
}

/// The bot held out when the model was fit, as a newly allocated string.
///
/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dialeval_hybrid_model_held_out(h: *const DialevalHybridModel, out: *mut *mut c_char) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        let h = h.as_ref().ok_or_else(|| Failure::new(DialevalStatus::NullPointer, "handle is null"))?;
        let s = CString::new(h.0.held_out_bot.to_string()).map_err(|e| Failure::new(DialevalStatus::Format, e.to_string()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// Pearson r with a permutation p-value. `p_out` may be NULL to skip the permutation test.
///
/// # Safety
/// `x` and `y` must point to `n` doubles; `r_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dialeval_pearson(x: *const f64, y: *const f64, n: usize, r_out: *mut f64, p_out: *mut f64) -> DialevalStatus {
    guard(|| {
        out_arg(r_out, "r_out")?;
        let x = slice_arg(x, n, "x")?;
        let y = slice_arg(y, n, "y")?;
        if p_out.is_null() {
            *r_out = stats::pearson_r(x, y).map_err(stats_failure)?;
        } else {
            let c = stats::pearson(x, y).map_err(stats_failure)?;
            *r_out = c.r;
            *p_out = c.p;
        }
        Ok(())
    })
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `x` and `y` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dialeval_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = stats::spearman(slice_arg(x, n, "x")?, slice_arg(y, n, "y")?).map_err(stats_failure)?;
        Ok(())
    })
}

/// Kendall tau-b.
///
/// # Safety
/// `x` and `y` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dialeval_kendall(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = stats::kendall(slice_arg(x, n, "x")?, slice_arg(y, n, "y")?).map_err(stats_failure)?;
        Ok(())
    })
}

/// Cohen's kappa between two raters' integer labels.
///
/// # Safety
/// `a` and `b` must point to `n` integers; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dialeval_cohen_kappa(a: *const i64, b: *const i64, n: usize, out: *mut f64) -> DialevalStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = stats::cohen_kappa(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?).map_err(stats_failure)?;
        Ok(())
    })
}
