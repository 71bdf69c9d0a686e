//! C interface to the `fode` library.
//!
//! Models are opaque handles created by `fode_model_new` or
//! `fode_model_load` and released with `fode_model_free`. Every fallible
//! function returns a `FodeStatus`; on failure the message is available
//! from `fode_last_error_message` on the same thread.
//!
//! Windows and states are `window_len × channels` arrays in row-major
//! order (element `(n, c)` at `n * channels + c`).
//!
//! # Safety
//!
//! Every pointer argument must be null or valid for the length passed
//! with it. Handles must come from this library and must not be used
//! after `fode_model_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fode::model::{FieldKind, FilterInit, ModelConfig};
use fode::odeint::SolverConfig;
use fode::{FodeError, Matrix};

/// Opaque model handle.
pub struct FodeModel {
    inner: fode::model::FodeModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FodeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Numerical = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FodeFieldKind {
    Fourier = 0,
    TimeDomain = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FodeFilterInit {
    Zeros = 0,
    Ones = 1,
    Uniform = 2,
    Xavier = 3,
}

/// Bound terms of the field's Lipschitz certificate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FodeLipschitz {
    pub l_fft: f64,
    pub l_ifft: f64,
    pub l_pack: f64,
    pub l_unpack: f64,
    pub l_g: f64,
    pub l_f_bound: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
        e.push(0);
    });
}

fn status_of(e: &FodeError) -> FodeStatus {
    match e {
        FodeError::ShapeMismatch { .. } => FodeStatus::ShapeMismatch,
        FodeError::Io(_) => FodeStatus::Io,
        FodeError::Checkpoint(_) => FodeStatus::Checkpoint,
        FodeError::NonFinite(_)
        | FodeError::MaxStepsExceeded(_)
        | FodeError::StepUnderflow { .. }
        | FodeError::Diverged { .. } => FodeStatus::Numerical,
        _ => FodeStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FodeStatus, String)>) -> FodeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FodeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FodeStatus::Panic
        }
    }
}

fn lift<T>(r: fode::Result<T>) -> Result<T, (FodeStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FodeStatus, String) {
    (FodeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const FodeModel) -> Result<&'a fode::model::FodeModel, (FodeStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (FodeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (FodeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, (FodeStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (FodeStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), (FodeStatus, String)> {
    if got != want {
        return Err((FodeStatus::ShapeMismatch, format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `buf_len`). Returns the full message length
/// including the terminator, so a call with `buf_len = 0` sizes the
/// buffer.
#[no_mangle]
pub unsafe extern "C" fn fode_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let msg: &[u8] = if e.is_empty() { b"\0" } else { &e };
        if !buf.is_null() && buf_len > 0 {
            let n = (msg.len() - 1).min(buf_len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fode_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates a forecasting model with Xavier perceptron weights. `kind` is
/// a `FodeFieldKind` and `k_init` a `FodeFilterInit` value.
#[no_mangle]
pub unsafe extern "C" fn fode_model_new(
    kind: u32,
    window_len: usize,
    channels: usize,
    hidden: usize,
    use_filter: bool,
    k_init: u32,
    seed: u64,
    out: *mut *mut FodeModel,
) -> FodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let kind = match kind {
            k if k == FodeFieldKind::Fourier as u32 => FieldKind::Fode,
            k if k == FodeFieldKind::TimeDomain as u32 => FieldKind::Node,
            k => return Err((FodeStatus::InvalidArgument, format!("unknown field kind {k}"))),
        };
        let k_init = u8::try_from(k_init)
            .ok()
            .and_then(FilterInit::from_code)
            .ok_or_else(|| (FodeStatus::InvalidArgument, format!("unknown filter init {k_init}")))?;
        let config = ModelConfig {
            hidden,
            use_filter,
            k_init,
            ..ModelConfig::forecasting(kind, window_len, channels)
        };
        let inner = lift(fode::model::FodeModel::new(config, seed))?;
        *out = Box::into_raw(Box::new(FodeModel { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fode_model_load(path: *const c_char, out: *mut *mut FodeModel) -> FodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = lift(fode::checkpoint::load(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(FodeModel { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fode_model_save(model: *const FodeModel, path: *const c_char) -> FodeStatus {
    guard(|| lift(fode::checkpoint::save(model_ref(model)?, path_arg(path)?)))
}

/// Releases a handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fode_model_free(model: *mut FodeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn fode_model_dims(
    model: *const FodeModel,
    window_len: *mut usize,
    channels: *mut usize,
) -> FodeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if window_len.is_null() || channels.is_null() {
            return Err(null("output"));
        }
        *window_len = m.window_len();
        *channels = m.channels();
        Ok(())
    })
}

/// Next-window forecast for one raw window, solved with the adaptive
/// solver at default tolerances.
#[no_mangle]
pub unsafe extern "C" fn fode_model_predict(
    model: *const FodeModel,
    window: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> FodeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.state_dim();
        check_len(len, d, "window")?;
        check_len(out_len, d, "output")?;
        let x = lift(Matrix::from_vec(m.window_len(), m.channels(), input(window, len, "window")?.to_vec()))?;
        let y = lift(fode::pipeline::predict_window(m, &x, &SolverConfig::default()))?;
        output(out, out_len, "output")?.copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Field value `dx/dt` at state `x` (model units) and time `t`.
#[no_mangle]
pub unsafe extern "C" fn fode_model_vector_field(
    model: *const FodeModel,
    x: *const f64,
    len: usize,
    t: f64,
    out: *mut f64,
    out_len: usize,
) -> FodeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.state_dim();
        check_len(len, d, "state")?;
        check_len(out_len, d, "output")?;
        let xs = lift(Matrix::from_vec(1, d, input(x, len, "state")?.to_vec()))?;
        let f = lift(m.field_batch(&xs, t))?;
        output(out, out_len, "output")?.copy_from_slice(f.as_slice());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fode_model_lipschitz(model: *const FodeModel, out: *mut FodeLipschitz) -> FodeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = lift(fode::analysis::lipschitz_bound(m))?;
        *out = FodeLipschitz {
            l_fft: r.l_fft,
            l_ifft: r.l_ifft,
            l_pack: r.l_pack,
            l_unpack: r.l_unpack,
            l_g: r.l_g,
            l_f_bound: r.l_f_bound,
        };
        Ok(())
    })
}

/// Complex DFT of length `n` (unnormalised forward, `1/n` inverse).
/// Input and output arrays may not alias.
#[no_mangle]
pub unsafe extern "C" fn fode_fft(
    re_in: *const f64,
    im_in: *const f64,
    n: usize,
    inverse: bool,
    re_out: *mut f64,
    im_out: *mut f64,
) -> FodeStatus {
    guard(|| {
        let (re, im) = (input(re_in, n, "re_in")?, input(im_in, n, "im_in")?);
        let x: Vec<_> = re.iter().zip(im).map(|(&a, &b)| num_complex::Complex64::new(a, b)).collect();
        let y = lift(if inverse { fode::spectral::ifft(&x) } else { fode::spectral::fft(&x) })?;
        let (ro, io) = (output(re_out, n, "re_out")?, output(im_out, n, "im_out")?);
        for (i, v) in y.iter().enumerate() {
            ro[i] = v.re;
            io[i] = v.im;
        }
        Ok(())
    })
}
