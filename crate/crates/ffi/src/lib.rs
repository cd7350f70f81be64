//! C ABI over `dsp-core`.
//!
//! Every fallible function returns a [`DspStatus`]. On failure the message
//! is available from [`dsp_last_error`] on the same thread until the next
//! failing call. Objects are opaque handles created by `*_new`/`*_read`/
//! [`dsp_pool`] and released with the matching `*_free`.
//!
//! Frame buffers are row-major `n × d` (one frame per row). Descriptor
//! buffers are column-major `d × p`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dsp_core::data::FeatureSequence;
use dsp_core::kernel_svm::{read_model, KernelKind, KernelSvm};
use dsp_core::perturb::Perturbation;
use dsp_core::pool::{pool_sequence, read_descriptor, write_descriptor, DspParams, HingeVariant};
use dsp_core::stiefel::StiefelPoint;
use dsp_core::DspError;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DspStatus {
    Ok = 0,
    NullArgument = 1,
    MissingInput = 2,
    InvalidInput = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

impl From<&DspError> for DspStatus {
    fn from(e: &DspError) -> Self {
        match e {
            DspError::MissingInput(_) => DspStatus::MissingInput,
            DspError::Io(_) | DspError::Csv(_) => DspStatus::Io,
            e if e.exit_code() == 4 => DspStatus::Numerical,
            _ => DspStatus::InvalidInput,
        }
    }
}

/// Pooling parameters.
pub struct DspPoolParams {
    inner: DspParams,
}

/// Pooled `d × p` subspace descriptor.
pub struct DspDescriptor {
    point: StiefelPoint,
}

/// Trained projection-kernel SVM.
pub struct DspSvm {
    inner: KernelSvm,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DspStatus, String);

impl From<DspError> for Failure {
    fn from(e: DspError) -> Self {
        Failure(DspStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DspStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DspStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DspStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DspStatus::InvalidInput, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dsp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dsp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default parameters with `p` hyperplanes.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dsp_params_new(p: usize, out: *mut *mut DspPoolParams) -> DspStatus {
    guard(|| put(out, DspPoolParams { inner: DspParams { p, ..DspParams::default() } }))
}

/// # Safety
/// `params` must be a handle from [`dsp_params_new`] or NULL.
#[no_mangle]
pub unsafe extern "C" fn dsp_params_free(params: *mut DspPoolParams) {
    free(params)
}

/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsp_params_set_ordering_weight(params: *mut DspPoolParams, weight: f64) -> DspStatus {
    guard(|| {
        let params = get_mut(params, "params")?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Failure(DspStatus::InvalidInput, format!("ordering weight must be finite and non-negative, got {weight}")));
        }
        params.inner.ordering_weight = weight;
        Ok(())
    })
}

/// Nonzero `squared` selects the squared hinge.
///
/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsp_params_set_squared_hinge(params: *mut DspPoolParams, squared: i32) -> DspStatus {
    guard(|| {
        get_mut(params, "params")?.inner.hinge_variant = if squared != 0 { HingeVariant::SquaredHinge } else { HingeVariant::Hinge };
        Ok(())
    })
}

/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsp_params_set_seed(params: *mut DspPoolParams, seed: u64) -> DspStatus {
    guard(|| {
        get_mut(params, "params")?.inner.rcg.seed = seed;
        Ok(())
    })
}

/// Pools `n` frames of dimension `d` against the same frames shifted by
/// `epsilon` (length `d`; NULL means no shift).
///
/// # Safety
/// `frames` must point to `n * d` doubles, `epsilon` to `d` doubles or be
/// NULL, and `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dsp_pool(
    params: *const DspPoolParams,
    frames: *const f64,
    n: usize,
    d: usize,
    epsilon: *const f64,
    out: *mut *mut DspDescriptor,
) -> DspStatus {
    guard(|| {
        let params = get(params, "params")?;
        if frames.is_null() {
            return Err(null("frames"));
        }
        let len = n.checked_mul(d).ok_or_else(|| Failure(DspStatus::InvalidInput, "n * d overflows".into()))?;
        let frames = DMatrix::from_row_slice(n, d, std::slice::from_raw_parts(frames, len));
        let eps = if epsilon.is_null() {
            DVector::zeros(d)
        } else {
            DVector::from_column_slice(std::slice::from_raw_parts(epsilon, d))
        };
        let rho = eps.norm();
        let seq = FeatureSequence::new("ffi", 0, frames)?;
        let pooled = pool_sequence(&seq, &Perturbation::from_epsilon(eps, rho, 0.0, 0.0), &params.inner)?;
        put(out, DspDescriptor { point: pooled.descriptor.point })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsp_descriptor_read(path: *const c_char, out: *mut *mut DspDescriptor) -> DspStatus {
    guard(|| {
        let point = read_descriptor(&path_arg(path)?)?;
        put(out, DspDescriptor { point })
    })
}

/// # Safety
/// `desc` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dsp_descriptor_write(desc: *const DspDescriptor, path: *const c_char) -> DspStatus {
    guard(|| Ok(write_descriptor(&get(desc, "descriptor")?.point, &path_arg(path)?)?))
}

/// # Safety
/// `desc` must be a live handle; `d` and `p` writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn dsp_descriptor_shape(desc: *const DspDescriptor, d: *mut usize, p: *mut usize) -> DspStatus {
    guard(|| {
        let desc = get(desc, "descriptor")?;
        if let Some(d) = d.as_mut() {
            *d = desc.point.dim();
        }
        if let Some(p) = p.as_mut() {
            *p = desc.point.rank();
        }
        Ok(())
    })
}

/// Copies the descriptor column-major into `out`, which holds `len` doubles.
///
/// # Safety
/// `desc` must be a live handle and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dsp_descriptor_copy(desc: *const DspDescriptor, out: *mut f64, len: usize) -> DspStatus {
    guard(|| {
        let w = get(desc, "descriptor")?.point.matrix();
        if out.is_null() {
            return Err(null("out"));
        }
        if len != w.len() {
            return Err(Failure(DspStatus::InvalidInput, format!("buffer holds {len} values, descriptor has {}", w.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// # Safety
/// `desc` must be a handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dsp_descriptor_free(desc: *mut DspDescriptor) {
    free(desc)
}

/// `exp(beta * ||AᵀB||²_F)`.
///
/// # Safety
/// `a`, `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsp_projection_kernel(a: *const DspDescriptor, b: *const DspDescriptor, beta: f64, out: *mut f64) -> DspStatus {
    guard(|| {
        let (a, b) = (get(a, "a")?, get(b, "b")?);
        let out = get_mut(out, "out")?;
        *out = KernelKind::Projection { beta }.eval(a.point.matrix(), b.point.matrix())?;
        Ok(())
    })
}

/// Loads a model written by `dsp train-svm`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsp_svm_read(path: *const c_char, out: *mut *mut DspSvm) -> DspStatus {
    guard(|| {
        let inner = read_model(&path_arg(path)?)?;
        put(out, DspSvm { inner })
    })
}

/// # Safety
/// `svm` and `desc` must be live handles and `label` writable.
#[no_mangle]
pub unsafe extern "C" fn dsp_svm_predict(svm: *const DspSvm, desc: *const DspDescriptor, label: *mut usize) -> DspStatus {
    guard(|| {
        let svm = get(svm, "svm")?;
        let desc = get(desc, "descriptor")?;
        let label = get_mut(label, "label")?;
        *label = svm.inner.predict(desc.point.matrix())?;
        Ok(())
    })
}

/// # Safety
/// `svm` must be a handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dsp_svm_free(svm: *mut DspSvm) {
    free(svm)
}
