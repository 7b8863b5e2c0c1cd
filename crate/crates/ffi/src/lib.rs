//! C ABI over the h2g core: slide pyramids, the frozen cluster model, the
//! patch classifier, and the stand-alone numeric kernels.
//!
//! Every function returns an [`H2gStatus`]. On failure the message is kept per
//! thread and can be fetched with [`h2g_last_error_message`]. Handles are
//! opaque; free each one with its matching `*_free` function. Panics never
//! cross the boundary, they come back as `H2G_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use h2g::cluster::{ClusterModel, FeatureVector};
use h2g::learn::{Checkpoint, PatchClassifier, Probabilities};
use h2g::pyramid::{PyramidImage, Raster};
use h2g::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum H2gStatus {
    Ok = 0,
    InvalidInput = 1,
    Format = 2,
    Io = 3,
    EmptyPopulation = 4,
    TrainingDiverged = 5,
    Inference = 6,
    Executor = 7,
    Serialization = 8,
    NullPointer = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

fn status_of(e: &Error) -> H2gStatus {
    match e {
        Error::InvalidInput(_) => H2gStatus::InvalidInput,
        Error::Format { .. } => H2gStatus::Format,
        Error::Io(_) => H2gStatus::Io,
        Error::EmptyPopulation(_) => H2gStatus::EmptyPopulation,
        Error::TrainingDiverged { .. } => H2gStatus::TrainingDiverged,
        Error::Inference { .. } => H2gStatus::Inference,
        Error::Executor(_) => H2gStatus::Executor,
        Error::Stage { source, .. } => status_of(source),
        Error::Serde(_) => H2gStatus::Serialization,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    // interior NULs would truncate the message on the C side anyway
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(H2gStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: H2gStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> H2gStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => H2gStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            H2gStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(H2gStatus::NullPointer, format!("{what} is null"))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    non_null(p, "path")?;
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(H2gStatus::InvalidInput, "path is not valid UTF-8"),
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn checked_len(parts: &[usize]) -> Result<usize, Failure> {
    parts
        .iter()
        .try_fold(1usize, |acc, &v| acc.checked_mul(v))
        .map_or_else(|| fail(H2gStatus::InvalidInput, "buffer size overflows"), Ok)
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    non_null(out, what)?;
    out.write(value);
    Ok(())
}

/// Message of the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn h2g_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---- pyramids ----

/// A loaded HPYR slide pyramid.
pub struct H2gPyramid(PyramidImage);

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn h2g_pyramid_open(path: *const c_char, out: *mut *mut H2gPyramid) -> H2gStatus {
    guard(|| {
        non_null(out, "out")?;
        out.write(ptr::null_mut());
        let image = h2g::pyramid::read_file(path_arg(path)?)?;
        out.write(Box::into_raw(Box::new(H2gPyramid(image))));
        Ok(())
    })
}

/// # Safety
/// `p` must come from `h2g_pyramid_open` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn h2g_pyramid_free(p: *mut H2gPyramid) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Channel count (1 or 3), level count and tile edge of the pyramid.
///
/// # Safety
/// `p` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn h2g_pyramid_info(
    p: *const H2gPyramid,
    channels: *mut u32,
    levels: *mut u32,
    tile_size: *mut u32,
) -> H2gStatus {
    guard(|| {
        non_null(p, "pyramid")?;
        let img = &(*p).0;
        write_out(channels, img.channels() as u32, "channels")?;
        write_out(levels, img.level_count() as u32, "levels")?;
        write_out(tile_size, img.tile_size(), "tile_size")
    })
}

/// # Safety
/// `p` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn h2g_pyramid_level_dims(
    p: *const H2gPyramid,
    level: usize,
    width: *mut u64,
    height: *mut u64,
) -> H2gStatus {
    guard(|| {
        non_null(p, "pyramid")?;
        let lvl = (*p).0.level(level)?;
        write_out(width, lvl.width, "width")?;
        write_out(height, lvl.height, "height")
    })
}

/// Copies a `w`×`h` region at `level` into `buf`, row-major and channel
/// interleaved. Pixels outside the image read as white. `buf_len` must be at
/// least `w * h * channels`.
///
/// # Safety
/// `p` must be a live handle and `buf` must hold `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn h2g_pyramid_read_region(
    p: *const H2gPyramid,
    level: usize,
    x: i64,
    y: i64,
    w: usize,
    h: usize,
    buf: *mut u8,
    buf_len: usize,
) -> H2gStatus {
    guard(|| {
        non_null(p, "pyramid")?;
        let img = &(*p).0;
        let need = checked_len(&[w, h, img.channels()])?;
        if buf_len < need {
            return fail(H2gStatus::BufferTooSmall, format!("region needs {need} bytes, buffer has {buf_len}"));
        }
        let region = img.read_region(level, x, y, w, h)?;
        slice_mut(buf, need, "buf")?.copy_from_slice(&region.data);
        Ok(())
    })
}

// ---- cluster model ----

/// A frozen standardize, project and nearest-centroid model.
pub struct H2gClusterModel(ClusterModel);

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn h2g_cluster_model_open(path: *const c_char, out: *mut *mut H2gClusterModel) -> H2gStatus {
    guard(|| {
        non_null(out, "out")?;
        out.write(ptr::null_mut());
        let model = ClusterModel::load(path_arg(path)?)?;
        out.write(Box::into_raw(Box::new(H2gClusterModel(model))));
        Ok(())
    })
}

/// # Safety
/// `m` must come from `h2g_cluster_model_open` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn h2g_cluster_model_free(m: *mut H2gClusterModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Feature dimension and cluster count.
///
/// # Safety
/// `m` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn h2g_cluster_model_dims(m: *const H2gClusterModel, dim: *mut usize, k: *mut usize) -> H2gStatus {
    guard(|| {
        non_null(m, "model")?;
        write_out(dim, (*m).0.d, "dim")?;
        write_out(k, (*m).0.k, "k")
    })
}

/// Assigns `n` feature rows of `dim` values each to their nearest centroid.
///
/// # Safety
/// `features` must hold `n * dim` doubles and `labels` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn h2g_cluster_model_assign(
    m: *const H2gClusterModel,
    features: *const f64,
    n: usize,
    dim: usize,
    labels: *mut u32,
) -> H2gStatus {
    guard(|| {
        non_null(m, "model")?;
        let model = &(*m).0;
        if dim != model.d {
            return fail(H2gStatus::InvalidInput, format!("model expects {} features, got {dim}", model.d));
        }
        let rows = slice(features, checked_len(&[n, dim])?, "features")?;
        let out = slice_mut(labels, n, "labels")?;
        for (row, label) in rows.chunks_exact(dim.max(1)).zip(out.iter_mut()) {
            *label = model.assign(&FeatureVector(row.to_vec()))? as u32;
        }
        Ok(())
    })
}

// ---- patch classifier ----

/// A trained patch classifier loaded from a checkpoint.
pub struct H2gClassifier(PatchClassifier);

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn h2g_classifier_open(path: *const c_char, out: *mut *mut H2gClassifier) -> H2gStatus {
    guard(|| {
        non_null(out, "out")?;
        out.write(ptr::null_mut());
        let ck = Checkpoint::load(path_arg(path)?)?;
        out.write(Box::into_raw(Box::new(H2gClassifier(ck.model))));
        Ok(())
    })
}

/// # Safety
/// `c` must come from `h2g_classifier_open` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn h2g_classifier_free(c: *mut H2gClassifier) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// # Safety
/// `c` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn h2g_classifier_dims(c: *const H2gClassifier, input_dim: *mut usize, classes: *mut usize) -> H2gStatus {
    guard(|| {
        non_null(c, "classifier")?;
        write_out(input_dim, (*c).0.input_dim, "input_dim")?;
        write_out(classes, (*c).0.classes, "classes")
    })
}

/// Softmax class probabilities for `rows` input vectors. `probs` receives
/// `rows * classes` values, row-major.
///
/// # Safety
/// `inputs` must hold `rows * input_dim` doubles and `probs` `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn h2g_classifier_forward(
    c: *const H2gClassifier,
    inputs: *const f64,
    rows: usize,
    probs: *mut f64,
    probs_len: usize,
) -> H2gStatus {
    guard(|| {
        non_null(c, "classifier")?;
        let model = &(*c).0;
        let need = checked_len(&[rows, model.classes])?;
        if probs_len < need {
            return fail(H2gStatus::BufferTooSmall, format!("forward needs {need} outputs, buffer has {probs_len}"));
        }
        let x = slice(inputs, checked_len(&[rows, model.input_dim])?, "inputs")?;
        let p = model.forward(x)?;
        slice_mut(probs, need, "probs")?.copy_from_slice(&p.p);
        Ok(())
    })
}

// ---- kernels ----

/// Otsu threshold of a 256-bin histogram; foreground is `value > threshold`.
///
/// # Safety
/// `hist` must point to 256 counts.
#[no_mangle]
pub unsafe extern "C" fn h2g_otsu_threshold(hist: *const u64, threshold: *mut u8) -> H2gStatus {
    guard(|| {
        let h: &[u64; 256] = slice(hist, 256, "hist")?.try_into().expect("256 bins");
        let t = h2g::tissue::otsu_threshold(h)?;
        write_out(threshold, t, "threshold")
    })
}

unsafe fn probabilities(probs: *const f64, targets: *const f64, rows: usize, classes: usize) -> Result<(Probabilities, Vec<f64>), Failure> {
    let n = checked_len(&[rows, classes])?;
    let p = slice(probs, n, "probs")?.to_vec();
    let y = slice(targets, n, "targets")?.to_vec();
    Ok((Probabilities { rows, classes, p }, y))
}

/// Mean categorical cross-entropy of row-major probabilities against one-hot targets.
///
/// # Safety
/// `probs` and `targets` must each hold `rows * classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn h2g_ce_loss(
    probs: *const f64,
    targets: *const f64,
    rows: usize,
    classes: usize,
    loss: *mut f64,
) -> H2gStatus {
    guard(|| {
        let (p, y) = probabilities(probs, targets, rows, classes)?;
        write_out(loss, h2g::learn::ce_loss(&p, &y)?, "loss")
    })
}

/// Cluster-weighted cross-entropy: the mean over clusters present in the
/// batch of each cluster's mean cross-entropy. `clusters` holds one id per row.
///
/// # Safety
/// `probs` and `targets` must each hold `rows * classes` doubles and `clusters` `rows` ids.
#[no_mangle]
pub unsafe extern "C" fn h2g_cwce_loss(
    probs: *const f64,
    targets: *const f64,
    clusters: *const i64,
    rows: usize,
    classes: usize,
    loss: *mut f64,
) -> H2gStatus {
    guard(|| {
        let (p, y) = probabilities(probs, targets, rows, classes)?;
        let q = slice(clusters, rows, "clusters")?;
        write_out(loss, h2g::learn::cwce_loss(&p, &y, q)?, "loss")
    })
}

/// Pixel counts and scores of one predicted mask against its truth.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct H2gMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
}

/// Scores two single-channel `width`×`height` masks; nonzero bytes are foreground.
///
/// # Safety
/// `pred` and `truth` must each hold `width * height` bytes.
#[no_mangle]
pub unsafe extern "C" fn h2g_score_slide(
    pred: *const u8,
    truth: *const u8,
    width: usize,
    height: usize,
    out: *mut H2gMetrics,
) -> H2gStatus {
    guard(|| {
        let n = checked_len(&[width, height])?;
        let p = Raster::new(width, height, 1, slice(pred, n, "pred")?.to_vec())?;
        let t = Raster::new(width, height, 1, slice(truth, n, "truth")?.to_vec())?;
        let m = h2g::eval::score_slide(&p, &t)?;
        write_out(
            out,
            H2gMetrics {
                tp: m.tp,
                fp: m.fp,
                fn_count: m.fn_,
                recall: m.recall,
                precision: m.precision,
                dsc: m.dsc,
            },
            "out",
        )
    })
}
