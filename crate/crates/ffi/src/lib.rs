//! C ABI over the `hetcoef` library.
//!
//! Objects are opaque handles created by `hc_*` constructors and released by
//! the matching `hc_*_free`. Every fallible call returns an [`HcStatus`]; on
//! failure [`hc_last_error_message`] describes the error for the calling
//! thread. Strings returned through `char **` out-parameters are owned by the
//! caller and must be released with [`hc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hetcoef::control::{estimate_control, passthrough_control, ControlEstimate};
use hetcoef::diagnostics::{diagnose, Tolerances};
use hetcoef::simulate::{simulate_seeded, DgpConfig};
use hetcoef::{sieve, BasisSpec, Dataset, Error, FittedModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcStatus {
    Ok = 0,
    InvalidArgument = 1,
    DataError = 2,
    IdentificationFailure = 3,
    IoError = 4,
    NullPointer = 5,
    NotApplicable = 6,
    Panic = 7,
}

pub struct HcDataset {
    inner: Dataset,
}

pub struct HcControl {
    inner: ControlEstimate,
}

pub struct HcFit {
    inner: FittedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure {
    status: HcStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidBasis(_)
            | Error::DimensionMismatch { .. }
            | Error::OutOfDomain { .. }
            | Error::InvalidConfig(_) => HcStatus::InvalidArgument,
            Error::InvalidData(_) | Error::Csv(_) | Error::Json(_) => HcStatus::DataError,
            Error::IdentificationFailure { .. } => HcStatus::IdentificationFailure,
            Error::NotApplicable(_) => HcStatus::NotApplicable,
            Error::Io(_) => HcStatus::IoError,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn fail(status: HcStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

fn guard<F>(body: F) -> HcStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            HcStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("internal panic");
            HcStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(HcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(HcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(HcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if len < values.len() {
        return Err(fail(
            HcStatus::InvalidArgument,
            format!("buffer holds {len} values, need {}", values.len()),
        ));
    }
    if !values.is_empty() {
        if buf.is_null() {
            return Err(fail(HcStatus::NullPointer, "output buffer is null"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    }
    Ok(())
}

fn parse_basis(s: &str) -> Result<BasisSpec, Failure> {
    let spec: BasisSpec = s.parse()?;
    spec.validate()?;
    Ok(spec)
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| fail(HcStatus::DataError, "output contains a NUL byte"))
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `hc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn hc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reads a dataset CSV (columns `y`, `x` or `x1..xT`, optional `z`, `v`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_dataset_from_csv(
    path: *const c_char,
    out: *mut *mut HcDataset,
) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = as_str(path, "path")?;
        let file = std::fs::File::open(path).map_err(Error::from)?;
        let inner = Dataset::read_csv(std::io::BufReader::new(file))?;
        *out = Box::into_raw(Box::new(HcDataset { inner }));
        Ok(())
    })
}

/// Builds a dataset from row-major arrays. `z` and `v` may be null.
///
/// # Safety
/// `y`, `z`, `v` must hold `n` values and `x` must hold `n * x_cols` values.
#[no_mangle]
pub unsafe extern "C" fn hc_dataset_new(
    y: *const f64,
    x: *const f64,
    n: usize,
    x_cols: usize,
    z: *const u32,
    v: *const f64,
    out: *mut *mut HcDataset,
) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let y = as_slice(y, n, "y")?.to_vec();
        let x = as_slice(x, n * x_cols, "x")?.to_vec();
        let z = (!z.is_null()).then(|| std::slice::from_raw_parts(z, n).to_vec());
        let v = (!v.is_null()).then(|| std::slice::from_raw_parts(v, n).to_vec());
        let inner = Dataset::new(y, x, x_cols, z, v)?;
        *out = Box::into_raw(Box::new(HcDataset { inner }));
        Ok(())
    })
}

/// Simulates `n` rows from a DGP configuration given as JSON.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_simulate(
    config_json: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut HcDataset,
) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = as_str(config_json, "config_json")?;
        let config: DgpConfig = serde_json::from_str(text)
            .map_err(|e| fail(HcStatus::InvalidArgument, format!("invalid DGP config: {e}")))?;
        let sim = simulate_seeded(&config, n, seed)?;
        *out = Box::into_raw(Box::new(HcDataset { inner: sim.data }));
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hc_dataset_rows(ds: *const HcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_dataset_free(ds: *mut HcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Estimates the control variable from the instrument column.
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_control_estimate(
    ds: *const HcDataset,
    out: *mut *mut HcControl,
) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner = estimate_control(&as_ref(ds, "dataset")?.inner)?;
        *out = Box::into_raw(Box::new(HcControl { inner }));
        Ok(())
    })
}

/// Uses the dataset's `v` column as the control.
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_control_passthrough(
    ds: *const HcDataset,
    out: *mut *mut HcControl,
) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner = passthrough_control(&as_ref(ds, "dataset")?.inner)?;
        *out = Box::into_raw(Box::new(HcControl { inner }));
        Ok(())
    })
}

/// Copies the control values into `buf`, which must hold at least as many
/// values as the dataset has rows.
///
/// # Safety
/// `ctrl` must be a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn hc_control_values(
    ctrl: *const HcControl,
    buf: *mut f64,
    len: usize,
) -> HcStatus {
    guard(|| copy_out(&as_ref(ctrl, "control")?.inner.v_hat, buf, len))
}

/// # Safety
/// `ctrl` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_control_free(ctrl: *mut HcControl) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Fits the sieve control regression. `p` and `psi` use the CLI syntax, e.g.
/// `"power:2"` and `"indicator:8"`.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_fit(
    ds: *const HcDataset,
    ctrl: *const HcControl,
    p: *const c_char,
    psi: *const c_char,
    ridge: f64,
    out: *mut *mut HcFit,
) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = &as_ref(ds, "dataset")?.inner;
        let control = &as_ref(ctrl, "control")?.inner;
        let p = parse_basis(as_str(p, "p")?)?;
        let psi = parse_basis(as_str(psi, "psi")?)?;
        let inner = hetcoef::fit(data, control, &p, &psi, ridge)?;
        *out = Box::into_raw(Box::new(HcFit { inner }));
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_free(fit: *mut HcFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Basis dimensions `J` (outcome) and `K` (control sieve).
///
/// # Safety
/// `fit` must be a live handle; `j` and `k` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_dims(fit: *const HcFit, j: *mut usize, k: *mut usize) -> HcStatus {
    guard(|| {
        let fit = &as_ref(fit, "fit")?.inner;
        *out_ptr(j, "j")? = fit.j();
        *out_ptr(k, "k")? = fit.k();
        Ok(())
    })
}

/// Copies the `J * K` coefficients, laid out `(b_1', ..., b_J')'`.
///
/// # Safety
/// `fit` must be a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_coefficients(
    fit: *const HcFit,
    buf: *mut f64,
    len: usize,
) -> HcStatus {
    guard(|| copy_out(&as_ref(fit, "fit")?.inner.b, buf, len))
}

/// # Safety
/// `fit` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_gram_min_eigenvalue(fit: *const HcFit, out: *mut f64) -> HcStatus {
    guard(|| {
        *out_ptr(out, "out")? = as_ref(fit, "fit")?.inner.gram_min_eigenvalue;
        Ok(())
    })
}

/// `p(x)' q_hat(v)`.
///
/// # Safety
/// `fit` must be a live handle; `x` must hold `x_len` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_predict_crf(
    fit: *const HcFit,
    x: *const f64,
    x_len: usize,
    v: f64,
    out: *mut f64,
) -> HcStatus {
    guard(|| {
        let fit = &as_ref(fit, "fit")?.inner;
        let x = as_slice(x, x_len, "x")?;
        *out_ptr(out, "out")? = sieve::predict_crf(fit, x, v)?;
        Ok(())
    })
}

/// Average structural function at `x`.
///
/// # Safety
/// Handles must be live; `x` must hold `x_len` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_asf(
    fit: *const HcFit,
    ctrl: *const HcControl,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
) -> HcStatus {
    guard(|| {
        let fit = &as_ref(fit, "fit")?.inner;
        let control = &as_ref(ctrl, "control")?.inner;
        let x = as_slice(x, x_len, "x")?;
        *out_ptr(out, "out")? = sieve::asf(fit, control, x)?;
        Ok(())
    })
}

/// Treatment effects `mu(t) - mu(0)`; writes the count to `written`.
///
/// # Safety
/// Handles must be live; `buf` must hold `len` values; `written` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_ate(
    fit: *const HcFit,
    ctrl: *const HcControl,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> HcStatus {
    guard(|| {
        let fit = &as_ref(fit, "fit")?.inner;
        let control = &as_ref(ctrl, "control")?.inner;
        let written = out_ptr(written, "written")?;
        let ate = sieve::ate(fit, control)?;
        copy_out(&ate, buf, len)?;
        *written = ate.len();
        Ok(())
    })
}

/// Serializes the fit as JSON. Free the result with [`hc_string_free`].
///
/// # Safety
/// `fit` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_fit_to_json(fit: *const HcFit, out: *mut *mut c_char) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = serde_json::to_string(&as_ref(fit, "fit")?.inner).map_err(Error::from)?;
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// Runs the identification diagnostics with default tolerances and returns
/// the report as JSON. Failed conditions are verdicts in the report, not
/// error statuses.
///
/// # Safety
/// Handles must be live; `p` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_diagnose(
    ds: *const HcDataset,
    ctrl: *const HcControl,
    p: *const c_char,
    bins: usize,
    out: *mut *mut c_char,
) -> HcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = &as_ref(ds, "dataset")?.inner;
        let control = &as_ref(ctrl, "control")?.inner;
        let p = parse_basis(as_str(p, "p")?)?;
        let report = diagnose(data, control, &p, bins, &Tolerances::default())?;
        *out = into_c_string(serde_json::to_string(&report).map_err(Error::from)?)?;
        Ok(())
    })
}
