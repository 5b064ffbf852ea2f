//! C ABI over `rankadapt`: open embedding files, load checkpoints, score and
//! rank items, and compute rank correlations.
//!
//! Every function returns an [`RkStatus`]. On failure a description is
//! available from [`rk_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Panics never cross the
//! boundary; they surface as `RK_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::slice;

use rankadapt::checkpoint::{peek_precision, Checkpoint, CheckpointError};
use rankadapt::datastore::{read_any, AnyEmbeddingFile, EmbeddingFile, FormatError};
use rankadapt::metrics::{plcc, srcc, MetricError};
use rankadapt::model::Adapter;
use rankadapt::train::{rank, score_items, TrainError};
use rankadapt::{Precision, Scalar};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checkpoint = 5,
    DimMismatch = 6,
    UnknownQuery = 7,
    /// A metric is undefined for the input (fewer than two items or zero
    /// variance).
    Undefined = 8,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 9,
    Panic = 10,
    Internal = 11,
}

/// An open embedding file.
pub struct RkDataset {
    file: AnyEmbeddingFile,
}

enum AnyAdapter {
    F32(Adapter<f32>),
    F64(Adapter<f64>),
}

/// A loaded adapter checkpoint.
pub struct RkModel {
    adapter: AnyAdapter,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure {
    status: RkStatus,
    message: String,
}

impl Failure {
    fn new(status: RkStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        let status = match e {
            FormatError::Io { .. } => RkStatus::Io,
            _ => RkStatus::Format,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io { .. } => RkStatus::Io,
            _ => RkStatus::Checkpoint,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match &e {
            TrainError::DimMismatch { .. } => RkStatus::DimMismatch,
            TrainError::UnknownQuery(_) => RkStatus::UnknownQuery,
            _ => RkStatus::Internal,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        let status = match e {
            MetricError::TooFew { .. } | MetricError::ZeroVariance => RkStatus::Undefined,
            _ => RkStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Runs `body`, translating errors and panics into a status code.
fn guarded(body: impl FnOnce() -> Result<(), Failure>) -> RkStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            RkStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            RkStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer obtained from this
    // library that has not been freed.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(RkStatus::NullArgument, format!("{what} is null")))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::new(RkStatus::NullArgument, "path is null"));
    }
    // SAFETY: non-null and, per the API contract, NUL-terminated.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::new(RkStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `ptr` must be null only when `len` is 0; otherwise it must point to `len`
/// readable values.
unsafe fn in_slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::new(RkStatus::NullArgument, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

/// # Safety
/// As [`in_slice`], for writable memory.
unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::new(RkStatus::NullArgument, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(RkStatus::NullArgument, format!("{what} is null")));
    }
    // SAFETY: non-null; the caller provides writable storage for one `T`.
    unsafe { out.write(value) };
    Ok(())
}

/// Message for the most recent failed call on this thread, or an empty
/// string. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn rk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opens and validates an embedding file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_dataset_open(path: *const c_char, out: *mut *mut RkDataset) -> RkStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Failure::new(RkStatus::NullArgument, "out is null"));
        }
        let file = read_any(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(RkDataset { file })), "out")
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must come from [`rk_dataset_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rk_dataset_free(dataset: *mut RkDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Header dimensions and record counts.
///
/// # Safety
/// `dataset` must be a live handle; every output pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_dataset_info(
    dataset: *const RkDataset,
    p: *mut u32,
    d: *mut u32,
    t: *mut u32,
    items: *mut u64,
    queries: *mut u32,
) -> RkStatus {
    guarded(|| {
        let ds = non_null(dataset, "dataset")?;
        let dims = ds.file.dims();
        let (n_items, n_queries) = match &ds.file {
            AnyEmbeddingFile::F32(f) => (f.items.len(), f.queries.len()),
            AnyEmbeddingFile::F64(f) => (f.items.len(), f.queries.len()),
        };
        write_out(p, dims.p as u32, "p")?;
        write_out(d, dims.d as u32, "d")?;
        write_out(t, dims.t as u32, "t")?;
        write_out(items, n_items as u64, "items")?;
        write_out(queries, n_queries as u32, "queries")
    })
}

/// Loads an adapter checkpoint of either precision.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_model_load(path: *const c_char, out: *mut *mut RkModel) -> RkStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Failure::new(RkStatus::NullArgument, "out is null"));
        }
        let path = path_arg(path)?;
        let adapter = match peek_precision(&path)? {
            Precision::F32 => AnyAdapter::F32(Checkpoint::<f32>::load(&path)?.adapter),
            Precision::F64 => AnyAdapter::F64(Checkpoint::<f64>::load(&path)?.adapter),
        };
        write_out(out, Box::into_raw(Box::new(RkModel { adapter })), "out")
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`rk_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rk_model_free(model: *mut RkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dataset at the model's precision; converts when the widths differ.
fn file_as<F: Scalar>(ds: &RkDataset) -> EmbeddingFile<F> {
    match &ds.file {
        AnyEmbeddingFile::F32(f) => f.cast(),
        AnyEmbeddingFile::F64(f) => f.cast(),
    }
}

fn all_scores(model: &RkModel, ds: &RkDataset) -> Result<Vec<f64>, Failure> {
    fn go<F: Scalar>(a: &Adapter<F>, ds: &RkDataset) -> Result<Vec<f64>, Failure> {
        let file = file_as::<F>(ds);
        let all: Vec<usize> = (0..file.items.len()).collect();
        Ok(score_items(a, &file, &all)?)
    }
    match &model.adapter {
        AnyAdapter::F32(a) => go(a, ds),
        AnyAdapter::F64(a) => go(a, ds),
    }
}

/// Regression scores for every item, in file order. `len` must equal the
/// item count.
///
/// # Safety
/// `model` and `dataset` must be live handles; `scores` must have room for
/// `len` values.
#[no_mangle]
pub unsafe extern "C" fn rk_model_score(
    model: *const RkModel,
    dataset: *const RkDataset,
    scores: *mut f64,
    len: usize,
) -> RkStatus {
    guarded(|| {
        let model = non_null(model, "model")?;
        let ds = non_null(dataset, "dataset")?;
        let values = all_scores(model, ds)?;
        if len != values.len() {
            return Err(Failure::new(
                RkStatus::InvalidArgument,
                format!("buffer holds {len} scores, dataset has {} items", values.len()),
            ));
        }
        out_slice(scores, len, "scores")?.copy_from_slice(&values);
        Ok(())
    })
}

/// Items of `query_id` by descending score, ties by ascending item id.
///
/// `*written` receives the number of ranked items. If `capacity` is smaller
/// the call returns `RK_STATUS_BUFFER_TOO_SMALL` without touching the
/// buffers, so callers can size them and retry.
///
/// # Safety
/// `model` and `dataset` must be live handles; `item_ids` and `scores` must
/// have room for `capacity` values; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_model_rank(
    model: *const RkModel,
    dataset: *const RkDataset,
    query_id: u32,
    item_ids: *mut u64,
    scores: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> RkStatus {
    guarded(|| {
        let model = non_null(model, "model")?;
        let ds = non_null(dataset, "dataset")?;
        if written.is_null() {
            return Err(Failure::new(RkStatus::NullArgument, "written is null"));
        }
        let ranked = match &model.adapter {
            AnyAdapter::F32(a) => rank(a, &file_as::<f32>(ds), query_id)?,
            AnyAdapter::F64(a) => rank(a, &file_as::<f64>(ds), query_id)?,
        };
        write_out(written, ranked.len(), "written")?;
        if capacity < ranked.len() {
            return Err(Failure::new(
                RkStatus::BufferTooSmall,
                format!("need room for {} items, got {capacity}", ranked.len()),
            ));
        }
        let ids = out_slice(item_ids, ranked.len(), "item_ids")?;
        let vals = out_slice(scores, ranked.len(), "scores")?;
        for ((id, v), r) in ids.iter_mut().zip(vals.iter_mut()).zip(&ranked) {
            *id = r.item_id;
            *v = r.score;
        }
        Ok(())
    })
}

fn correlation(
    f: fn(&[f64], &[f64]) -> Result<f64, MetricError>,
    x: *const f64,
    y: *const f64,
    n: usize,
    out: *mut f64,
) -> RkStatus {
    guarded(|| {
        // SAFETY: per the public functions' contracts.
        let (xs, ys) = unsafe { (in_slice(x, n, "x")?, in_slice(y, n, "y")?) };
        write_out(out, f(xs, ys)?, "out")
    })
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `x` and `y` must point to `n` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_srcc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> RkStatus {
    correlation(srcc, x, y, n, out)
}

/// Pearson linear correlation.
///
/// # Safety
/// As [`rk_srcc`].
#[no_mangle]
pub unsafe extern "C" fn rk_plcc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> RkStatus {
    correlation(plcc, x, y, n, out)
}
