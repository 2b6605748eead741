//! C ABI over the `rdec` library.
//!
//! Every fallible function returns an [`RdecStatus`]; on failure a message is
//! available from [`rdec_last_error_message`] on the same thread. Objects are
//! handed out as opaque pointers and must be released with their `_free`
//! function. Labels and assignments are `size_t` arrays; matrices are
//! row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rdec::config::{ExperimentConfig, RawConfig};
use rdec::kmeans::{self, KMeansResult};
use rdec::trainer::{self, RunReport, StopReason};
use rdec::{metrics, Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Config = 4,
    Io = 5,
    Parse = 6,
    Model = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> RdecStatus {
    match err {
        Error::Dimension { .. } => RdecStatus::DimensionMismatch,
        Error::InvalidArgument(_) => RdecStatus::InvalidArgument,
        Error::DegenerateCluster { .. } | Error::InfiniteDivergence { .. } => RdecStatus::Numeric,
        Error::Parse { .. } | Error::Csv(_) => RdecStatus::Parse,
        Error::Config(_) => RdecStatus::Config,
        Error::Model(_) => RdecStatus::Model,
        Error::Io(_) => RdecStatus::Io,
    }
}

struct Fail(RdecStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RdecStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RdecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RdecStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RdecStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be NULL or point to `len` readable elements.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `out` must be NULL or point to `cap` writable elements.
unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(
            RdecStatus::BufferTooSmall,
            format!("buffer holds {cap} elements, {} needed", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// # Safety
/// `out` must be NULL or a valid pointer to write one `T`.
unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// # Safety
/// `data` must be NULL or point to `rows * cols` readable doubles.
unsafe fn matrix(data: *const f64, rows: usize, cols: usize) -> Result<Matrix, Fail> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(RdecStatus::InvalidArgument, "matrix size overflows".into()))?;
    Ok(Matrix::from_vec(rows, cols, slice(data, len, "data")?.to_vec())?)
}

/// Message describing the last failure on this thread, or NULL. The pointer
/// stays valid until the next `rdec_*` call on the same thread.
#[no_mangle]
pub extern "C" fn rdec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Best-mapping clustering accuracy in [0, 1].
///
/// # Safety
/// `labels` and `assignments` must point to `n` readable elements; `out_acc` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdec_accuracy(labels: *const usize, assignments: *const usize, n: usize, out_acc: *mut f64) -> RdecStatus {
    guard(|| {
        let l = slice(labels, n, "labels")?;
        let a = slice(assignments, n, "assignments")?;
        let (acc, _) = metrics::accuracy(l, a)?;
        write(out_acc, acc)
    })
}

/// Adjusted Rand index; `n` must be at least 2.
///
/// # Safety
/// As for [`rdec_accuracy`].
#[no_mangle]
pub unsafe extern "C" fn rdec_adjusted_rand_index(
    labels: *const usize,
    assignments: *const usize,
    n: usize,
    out_ari: *mut f64,
) -> RdecStatus {
    guard(|| {
        let l = slice(labels, n, "labels")?;
        let a = slice(assignments, n, "assignments")?;
        write(out_ari, metrics::adjusted_rand_index(l, a)?)
    })
}

/// Opaque k-means result.
pub struct RdecKMeans {
    inner: KMeansResult,
}

/// Lloyd's k-means with `restarts` seeded random initializations.
///
/// # Safety
/// `points` must point to `n * dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdec_kmeans(
    points: *const f64,
    n: usize,
    dim: usize,
    k: usize,
    restarts: usize,
    max_iter: usize,
    seed: u64,
    out: *mut *mut RdecKMeans,
) -> RdecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = matrix(points, n, dim)?;
        let inner = kmeans::kmeans(&m, k, restarts, max_iter, seed)?;
        write(out, Box::into_raw(Box::new(RdecKMeans { inner })))
    })
}

/// # Safety
/// `km` must be NULL or a live handle from [`rdec_kmeans`].
#[no_mangle]
pub unsafe extern "C" fn rdec_kmeans_inertia(km: *const RdecKMeans) -> f64 {
    km.as_ref().map_or(f64::NAN, |k| k.inner.inertia)
}

/// # Safety
/// `km` must be a live handle; `out` must have room for `cap` elements (n needed).
#[no_mangle]
pub unsafe extern "C" fn rdec_kmeans_assignments(km: *const RdecKMeans, out: *mut usize, cap: usize) -> RdecStatus {
    guard(|| {
        let km = km.as_ref().ok_or_else(|| null("kmeans handle"))?;
        copy_out(&km.inner.assignments, out, cap)
    })
}

/// Centroids, row-major `k × dim`.
///
/// # Safety
/// `km` must be a live handle; `out` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn rdec_kmeans_centroids(km: *const RdecKMeans, out: *mut f64, cap: usize) -> RdecStatus {
    guard(|| {
        let km = km.as_ref().ok_or_else(|| null("kmeans handle"))?;
        copy_out(km.inner.centroids.as_slice(), out, cap)
    })
}

/// # Safety
/// `km` must be NULL or a handle from [`rdec_kmeans`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdec_kmeans_free(km: *mut RdecKMeans) {
    if !km.is_null() {
        drop(Box::from_raw(km));
    }
}

/// Opaque training configuration, initialized to the library defaults.
pub struct RdecConfig {
    raw: RawConfig,
}

#[no_mangle]
pub extern "C" fn rdec_config_new() -> *mut RdecConfig {
    Box::into_raw(Box::new(RdecConfig { raw: RawConfig::default() }))
}

/// Sets one option using the key names of the CLI config format
/// (for example `"gamma"`, `"tau"`, `"method"`, `"pretrain.optimizer"`).
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rdec_config_set(cfg: *mut RdecConfig, key: *const c_char, value: *const c_char) -> RdecStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config handle"))?;
        if key.is_null() || value.is_null() {
            return Err(null("key or value"));
        }
        let utf8 = |s: *const c_char| {
            CStr::from_ptr(s)
                .to_str()
                .map_err(|_| Fail(RdecStatus::InvalidArgument, "strings must be UTF-8".into()))
        };
        let (key, value) = (utf8(key)?, utf8(value)?);
        if key.starts_with("dataset.") || key.starts_with("subsample.") || key == "model" || key == "out" {
            return Err(Fail(RdecStatus::Config, format!("key '{key}' is not a training option")));
        }
        let mut next = cfg.raw.clone();
        next.set(key, value)?;
        ExperimentConfig::from_raw(&next, Path::new("."))?;
        cfg.raw = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from [`rdec_config_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdec_config_free(cfg: *mut RdecConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Opaque result of a full clustering run.
pub struct RdecRun {
    report: RunReport,
    embedding: Option<Matrix>,
}

/// Runs the configured method end to end (pretraining included when the
/// method needs an autoencoder). `labels` may be NULL; when given, ACC and
/// ARI are tracked at every checkpoint.
///
/// # Safety
/// `data` must point to `n * dim` doubles, `labels` must be NULL or point to
/// `n` elements, `cfg` must be a live handle (or NULL for defaults) and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rdec_train(
    data: *const f64,
    n: usize,
    dim: usize,
    labels: *const usize,
    k: usize,
    cfg: *const RdecConfig,
    out: *mut *mut RdecRun,
) -> RdecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = matrix(data, n, dim)?;
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice(labels, n, "labels")?)
        };
        let raw = cfg.as_ref().map_or_else(RawConfig::default, |c| c.raw.clone());
        let train = ExperimentConfig::from_raw(&raw, Path::new("."))?.train;
        let run = trainer::run_method(&x, labels, k, &train, None)?;
        write(
            out,
            Box::into_raw(Box::new(RdecRun {
                report: run.report,
                embedding: run.embedding,
            })),
        )
    })
}

/// Number of fine-tuning iterations performed (k-means iterations for the k-means methods).
///
/// # Safety
/// `run` must be NULL or a live handle from [`rdec_train`].
#[no_mangle]
pub unsafe extern "C" fn rdec_run_iterations(run: *const RdecRun) -> usize {
    run.as_ref().map_or(0, |r| r.report.iterations)
}

/// True when the run stopped on the assignment-change threshold.
///
/// # Safety
/// As for [`rdec_run_iterations`].
#[no_mangle]
pub unsafe extern "C" fn rdec_run_converged(run: *const RdecRun) -> bool {
    run.as_ref().is_some_and(|r| r.report.stop_reason == StopReason::Converged)
}

/// Hard assignments, one per input row.
///
/// # Safety
/// `run` must be a live handle; `out` must have room for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn rdec_run_assignments(run: *const RdecRun, out: *mut usize, cap: usize) -> RdecStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run handle"))?;
        copy_out(&run.report.assignments, out, cap)
    })
}

/// Final embedding, row-major `n × latent_dim`; writes the column count to `out_cols`.
/// Fails with `RDEC_STATUS_INVALID_ARGUMENT` for raw k-means, which has no embedding.
///
/// # Safety
/// `run` must be a live handle; `out` must have room for `cap` doubles; `out_cols` writable.
#[no_mangle]
pub unsafe extern "C" fn rdec_run_embedding(run: *const RdecRun, out: *mut f64, cap: usize, out_cols: *mut usize) -> RdecStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run handle"))?;
        let z = run
            .embedding
            .as_ref()
            .ok_or_else(|| Fail(RdecStatus::InvalidArgument, "this method produces no embedding".into()))?;
        copy_out(z.as_slice(), out, cap)?;
        write(out_cols, z.cols())
    })
}

/// The run report as a JSON string; free it with [`rdec_string_free`]. NULL on failure.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rdec_run_report_json(run: *const RdecRun) -> *mut c_char {
    let Some(run) = run.as_ref() else {
        set_error("run handle is NULL");
        return ptr::null_mut();
    };
    match rdec_json(&run.report) {
        Some(s) => s.into_raw(),
        None => {
            set_error("report serialization failed");
            ptr::null_mut()
        }
    }
}

fn rdec_json(report: &RunReport) -> Option<CString> {
    CString::new(serde_json::to_string(report).ok()?).ok()
}

/// # Safety
/// `run` must be NULL or a handle from [`rdec_train`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdec_run_free(run: *mut RdecRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
