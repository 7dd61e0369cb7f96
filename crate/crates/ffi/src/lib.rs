//! C ABI over the encoder, patch masking and evaluation metrics.
//!
//! Every function returns an [`MpmaeStatus`]; on failure the message is
//! available from [`mpmae_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;

use mpmae::eval::{macro_iou, micro_f1, overall_accuracy, EvalEncoder};
use mpmae::masking::{sample_mask, PatchGrid};
use mpmae::model::{EncoderConfig, OPTICAL_BANDS};
use mpmae::nn::Tensor;
use mpmae::pretrain::{load_checkpoint, optical_input};
use mpmae::schema::BandStats;
use mpmae::synthgen::{Dataset, SampleSource};
use mpmae::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpmaeStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullPointer = 1,
    /// Bad argument, configuration or buffer size.
    InvalidArgument = 2,
    /// Missing, corrupt or incompatible data on disk.
    DataError = 3,
    /// Non-finite values or a broken internal invariant.
    NumericFailure = 4,
    Panic = 5,
}

/// A trained or randomly initialized encoder.
pub struct MpmaeEncoder {
    inner: EvalEncoder,
}

/// A dataset directory written by `mpmae gen`, with its band statistics.
pub struct MpmaeDataset {
    inner: Dataset,
    stats: BandStats,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> MpmaeStatus {
    match e.exit_code() {
        2 => MpmaeStatus::InvalidArgument,
        3 => MpmaeStatus::DataError,
        _ => MpmaeStatus::NumericFailure,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MpmaeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpmaeStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null or not valid UTF-8"));
            MpmaeStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MpmaeStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| Fail::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn check_len(name: &str, expected: usize, found: usize) -> Result<(), Fail> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            name: name.into(),
            expected: vec![expected],
            found: vec![found],
        }
        .into());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpmae_version() -> *const c_char {
    static V: OnceLock<CString> = OnceLock::new();
    V.get_or_init(|| CString::new(env!("CARGO_PKG_VERSION")).unwrap()).as_ptr()
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mpmae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

// ----------------------------------------------------------------- encoder

/// Load the encoder from a pretraining checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_encoder_load(path: *const c_char, out: *mut *mut MpmaeEncoder) -> MpmaeStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let ck = load_checkpoint(path)?;
        let inner = EvalEncoder::from_checkpoint(&ck, "ffi")?;
        *out = Box::into_raw(Box::new(MpmaeEncoder { inner }));
        Ok(())
    })
}

/// A randomly initialized tiny encoder for `image_size` inputs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_encoder_random(
    image_size: usize,
    patch_size: usize,
    seed: u64,
    out: *mut *mut MpmaeEncoder,
) -> MpmaeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = EncoderConfig::tiny(image_size, patch_size);
        cfg.grid()?;
        let inner = EvalEncoder::random(&cfg, seed, "ffi")?;
        *out = Box::into_raw(Box::new(MpmaeEncoder { inner }));
        Ok(())
    })
}

/// # Safety
/// `enc` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mpmae_encoder_free(enc: *mut MpmaeEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Input side length, patch size and pooled feature width.
///
/// # Safety
/// `enc` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_encoder_info(
    enc: *const MpmaeEncoder,
    image_size: *mut usize,
    patch_size: *mut usize,
    feature_dim: *mut usize,
) -> MpmaeStatus {
    guard(|| {
        let enc = enc.as_ref().ok_or(Fail::Null("encoder"))?;
        let cfg = enc.inner.config();
        *out_arg(image_size, "image_size")? = cfg.image_size;
        *out_arg(patch_size, "patch_size")? = cfg.patch_size;
        *out_arg(feature_dim, "feature_dim")? = cfg.widths[3];
        Ok(())
    })
}

/// Pooled features for `n` standardized images laid out `n × S × S × 12`.
/// `out` receives `n × feature_dim` floats.
///
/// # Safety
/// `input` and `out` must hold `input_len` and `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mpmae_encoder_embed(
    enc: *const MpmaeEncoder,
    input: *const f32,
    n: usize,
    input_len: usize,
    out: *mut f32,
    out_len: usize,
) -> MpmaeStatus {
    guard(|| {
        let enc = enc.as_ref().ok_or(Fail::Null("encoder"))?;
        let cfg = enc.inner.config();
        let s = cfg.image_size;
        check_len("input", n * s * s * OPTICAL_BANDS, input_len)?;
        check_len("output", n * cfg.widths[3], out_len)?;
        if n == 0 {
            return Ok(());
        }
        let x = slice_arg(input, input_len, "input")?;
        let dst = slice_mut_arg(out, out_len, "out")?;
        let y = enc.inner.embed(Tensor::new(&[n, s, s, OPTICAL_BANDS], x.to_vec()))?;
        dst.copy_from_slice(y.data());
        Ok(())
    })
}

// ----------------------------------------------------------------- dataset

/// Open a dataset directory; it must carry band statistics.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_dataset_open(path: *const c_char, out: *mut *mut MpmaeDataset) -> MpmaeStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = Dataset::open(path)?;
        let stats = inner
            .stats()?
            .ok_or_else(|| Error::CorruptDataset(format!("{} has no band statistics", path.display())))?;
        *out = Box::into_raw(Box::new(MpmaeDataset { inner, stats }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mpmae_dataset_free(ds: *mut MpmaeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_dataset_len(ds: *const MpmaeDataset, len: *mut usize) -> MpmaeStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Fail::Null("dataset"))?;
        *out_arg(len, "len")? = ds.inner.len();
        Ok(())
    })
}

/// Standardized optical bands of sample `index`, top-left cropped to `size`,
/// written as `size × size × 12`.
///
/// # Safety
/// `ds` must be a live handle; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mpmae_dataset_optical(
    ds: *const MpmaeDataset,
    index: usize,
    size: usize,
    out: *mut f32,
    out_len: usize,
) -> MpmaeStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Fail::Null("dataset"))?;
        check_len("output", size * size * OPTICAL_BANDS, out_len)?;
        let reg = &ds.inner.manifest().registry;
        let sample = ds.inner.get(index)?;
        if size == 0 || size > sample.size {
            return Err(Error::InvalidArgument(format!("crop {size} does not fit raster {}", sample.size)).into());
        }
        let sample = if size == sample.size { sample } else { sample.crop(reg, 0, 0, size)? };
        let v = optical_input(&sample, &ds.stats, reg)?;
        slice_mut_arg(out, out_len, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

// ----------------------------------------------------------------- masking

/// Sample a random patch mask; `out[i]` is 1 when patch `i` (row-major) is hidden.
///
/// # Safety
/// `out` must hold `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mpmae_sample_mask(
    image_size: usize,
    patch_size: usize,
    ratio: f64,
    seed: u64,
    out: *mut u8,
    out_len: usize,
) -> MpmaeStatus {
    guard(|| {
        let grid = PatchGrid::new(image_size, patch_size)?;
        check_len("mask", grid.num_patches(), out_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(grid, ratio, &mut rng)?;
        let dst = slice_mut_arg(out, out_len, "out")?;
        for (d, &m) in dst.iter_mut().zip(&mask.masked) {
            *d = m as u8;
        }
        Ok(())
    })
}

// ----------------------------------------------------------------- metrics

/// # Safety
/// `pred` and `labels` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_overall_accuracy(
    pred: *const u32,
    labels: *const u32,
    len: usize,
    out: *mut f64,
) -> MpmaeStatus {
    guard(|| {
        let p = slice_arg(pred, len, "pred")?;
        let l = slice_arg(labels, len, "labels")?;
        *out_arg(out, "out")? = overall_accuracy(p, l)?;
        Ok(())
    })
}

/// Micro-averaged F1 over flattened multi-label indicators (nonzero = present).
///
/// # Safety
/// `pred` and `labels` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_micro_f1(pred: *const u8, labels: *const u8, len: usize, out: *mut f64) -> MpmaeStatus {
    guard(|| {
        let p: Vec<bool> = slice_arg(pred, len, "pred")?.iter().map(|&v| v != 0).collect();
        let l: Vec<bool> = slice_arg(labels, len, "labels")?.iter().map(|&v| v != 0).collect();
        *out_arg(out, "out")? = micro_f1(&p, &l)?;
        Ok(())
    })
}

/// Mean IoU over `classes`; pixels labelled `ignore` are skipped unless
/// `ignore` is negative.
///
/// # Safety
/// `pred` and `labels` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpmae_macro_iou(
    pred: *const u32,
    labels: *const u32,
    len: usize,
    classes: usize,
    ignore: i64,
    out: *mut f64,
) -> MpmaeStatus {
    guard(|| {
        let p = slice_arg(pred, len, "pred")?;
        let l = slice_arg(labels, len, "labels")?;
        let ignore = u32::try_from(ignore).ok();
        *out_arg(out, "out")? = macro_iou(p, l, classes, ignore)?;
        Ok(())
    })
}
