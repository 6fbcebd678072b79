//! C ABI over `dynstress`.
//!
//! Objects are opaque heap handles created by `ds_*_new` and released by
//! the matching `ds_*_free`. Every fallible call returns a `DsStatus`; on
//! failure the message is available from `ds_last_error_message` on the
//! same thread. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dynstress::calibrate::{self, CalibrationOptions};
use dynstress::model::{CompoundPoissonModel, Constraint, SeverityDistribution, StressSpec};
use dynstress::simulate;
use dynstress::stress::{DynamicsOptions, StressedDynamics};
use dynstress::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
    BufferTooSmall = 7,
}

/// Compound Poisson model handle.
pub struct DsModel {
    inner: CompoundPoissonModel,
}

/// Calibrated stressed dynamics handle.
pub struct DsDynamics {
    inner: StressedDynamics,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DsStatus {
    match e {
        Error::InvalidModel(_) | Error::InvalidConstraint(_) | Error::Config(_) => DsStatus::InvalidArgument,
        Error::Infeasible(_) => DsStatus::Infeasible,
        Error::NoConvergence { .. } | Error::Numerical(_) => DsStatus::Numerical,
        Error::Io(_) => DsStatus::Io,
    }
}

fn guard<F: FnOnce() -> Result<(), (DsStatus, String)>>(f: F) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside dynstress".into());
            DsStatus::Panic
        }
    }
}

fn lift<T>(r: dynstress::Result<T>) -> Result<T, (DsStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null() -> (DsStatus, String) {
    (DsStatus::NullPointer, "null pointer argument".into())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL,
/// or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates a model with Gamma(shape, rate) severities.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_model_new_gamma(
    kappa: f64,
    shape: f64,
    rate: f64,
    horizon: f64,
    out: *mut *mut DsModel,
) -> DsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let inner = lift(CompoundPoissonModel::new(kappa, SeverityDistribution::gamma(shape, rate), horizon))?;
        *out = Box::into_raw(Box::new(DsModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `ds_model_new_gamma` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_model_free(model: *mut DsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// VaR_alpha(X_t) under the reference measure.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_reference_var(model: *const DsModel, alpha: f64, t: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else { return Err(null()) };
        *out = lift(calibrate::reference_var(&m.inner, alpha, t))?;
        Ok(())
    })
}

/// CVaR_alpha(X_t) under the reference measure.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_reference_cvar(model: *const DsModel, alpha: f64, t: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else { return Err(null()) };
        *out = lift(calibrate::reference_cvar(&m.inner, alpha, t))?;
        Ok(())
    })
}

unsafe fn build_dynamics(
    model: *const DsModel,
    constraint: dynstress::Result<Constraint>,
    stress_time: f64,
    out: *mut *mut DsDynamics,
) -> Result<(), (DsStatus, String)> {
    let (Some(m), false) = (model.as_ref(), out.is_null()) else { return Err(null()) };
    let spec = StressSpec::at(vec![lift(constraint)?], stress_time);
    let mult = lift(calibrate::solve_general_multipliers(&m.inner, &spec, &CalibrationOptions::default()))?;
    let inner = lift(StressedDynamics::new(&m.inner, &spec, &mult, &DynamicsOptions::default()))?;
    *out = Box::into_raw(Box::new(DsDynamics { inner }));
    Ok(())
}

/// Calibrates the stress Q(X_{stress_time} < q) = alpha.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_dynamics_new_var(
    model: *const DsModel,
    q: f64,
    alpha: f64,
    stress_time: f64,
    out: *mut *mut DsDynamics,
) -> DsStatus {
    guard(|| build_dynamics(model, Constraint::var(q, alpha), stress_time, out))
}

/// Calibrates the stress VaR_alpha = q and CVaR_alpha = s at `stress_time`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_dynamics_new_cvar(
    model: *const DsModel,
    q: f64,
    s: f64,
    alpha: f64,
    stress_time: f64,
    out: *mut *mut DsDynamics,
) -> DsStatus {
    guard(|| build_dynamics(model, Constraint::cvar(q, s, alpha), stress_time, out))
}

/// # Safety
/// `dynamics` must come from a `ds_dynamics_new_*` call (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_dynamics_free(dynamics: *mut DsDynamics) {
    if !dynamics.is_null() {
        drop(Box::from_raw(dynamics));
    }
}

/// Copies the multipliers into `buf`; `len` receives their number.
/// Returns `BufferTooSmall` (with `len` set) when `cap` is insufficient.
///
/// # Safety
/// `buf` must be valid for `cap` doubles; `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_dynamics_multipliers(
    dynamics: *const DsDynamics,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> DsStatus {
    guard(|| {
        let (Some(d), false) = (dynamics.as_ref(), len.is_null()) else { return Err(null()) };
        let v = &d.inner.multipliers().values;
        *len = v.len();
        if cap < v.len() || (buf.is_null() && !v.is_empty()) {
            return Err((DsStatus::BufferTooSmall, format!("need room for {} values", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// Girsanov kernel h*(t, x, y).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_kernel(dynamics: *const DsDynamics, t: f64, x: f64, y: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let (Some(d), false) = (dynamics.as_ref(), out.is_null()) else { return Err(null()) };
        *out = lift(d.inner.kernel(t, x, y))?;
        Ok(())
    })
}

/// Stressed intensity kappa*(t, x).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_intensity(dynamics: *const DsDynamics, t: f64, x: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let (Some(d), false) = (dynamics.as_ref(), out.is_null()) else { return Err(null()) };
        *out = lift(d.inner.intensity(t, x))?;
        Ok(())
    })
}

/// dQ*/dP as a function of the state at the stress time.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_rn_terminal(dynamics: *const DsDynamics, x: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let (Some(d), false) = (dynamics.as_ref(), out.is_null()) else { return Err(null()) };
        *out = d.inner.rn_terminal(x);
        Ok(())
    })
}

/// Simulates `n_paths` stressed paths and writes X_T of each into `buf`.
///
/// # Safety
/// `buf` must be valid for `n_paths` doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_simulate_terminal(
    dynamics: *const DsDynamics,
    n_paths: usize,
    dt: f64,
    seed: u64,
    buf: *mut f64,
) -> DsStatus {
    guard(|| {
        let (Some(d), false) = (dynamics.as_ref(), buf.is_null()) else { return Err(null()) };
        let e = lift(simulate::simulate_stressed(&d.inner, n_paths, dt, seed))?;
        for (k, x) in e.terminal(0).into_iter().enumerate() {
            *buf.add(k) = x;
        }
        Ok(())
    })
}
