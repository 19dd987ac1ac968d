//! C interface to the xeegnet classifiers.
//!
//! Models live behind an opaque `XeegModel` handle. Every function returns an
//! `XeegStatus`; on failure a message for the calling thread is available
//! from `xeeg_last_error`. Arrays are caller-allocated and passed with their
//! length. Window data is channel-major `channels × samples` doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use xeegnet::filterbank::{design_bandpass, BandSpec};
use xeegnet::model::engine::{self, Input};
use xeegnet::model::{build_with_default_bank, load_checkpoint, save_checkpoint, ModelConfig, ModelParams, Preset};
use xeegnet::spectral::{band_power, welch};
use xeegnet::training::init_seed;
use xeegnet::{Band, Error};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XeegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct XeegModel {
    config: ModelConfig,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> XeegStatus {
    match e {
        Error::Config(_) | Error::Design(_) | Error::Shape(_) => XeegStatus::Config,
        Error::Data(_) | Error::Json(_) => XeegStatus::Data,
        Error::Io { .. } => XeegStatus::Io,
        Error::Numerical(_) => XeegStatus::Numerical,
    }
}

fn fail(status: XeegStatus, msg: impl Into<String>) -> XeegStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), XeegStatus>) -> XeegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            XeegStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(XeegStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: xeegnet::Result<T>) -> Result<T, XeegStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, XeegStatus> {
    if p.is_null() {
        return Err(fail(XeegStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(XeegStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn model_ref<'a>(m: *const XeegModel) -> Result<&'a XeegModel, XeegStatus> {
    m.as_ref().ok_or_else(|| fail(XeegStatus::NullPointer, "null model handle"))
}

unsafe fn in_slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], XeegStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(XeegStatus::NullPointer, "null input array"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], XeegStatus> {
    if len < need {
        return Err(fail(
            XeegStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {need} needed"),
        ));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(XeegStatus::NullPointer, "null output array"));
    }
    Ok(slice::from_raw_parts_mut(p, need))
}

unsafe fn put<T>(p: *mut T, v: T) -> Result<(), XeegStatus> {
    if p.is_null() {
        return Err(fail(XeegStatus::NullPointer, "null output pointer"));
    }
    p.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xeeg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn xeeg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Build a model from a named preset adapted to the given input shape.
/// Weights are initialized from `seed`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_from_preset(
    name: *const c_char,
    channels: usize,
    samples: usize,
    fs: f64,
    seed: u64,
    out: *mut *mut XeegModel,
) -> XeegStatus {
    guard(|| {
        let preset: Preset = lift(c_str(name)?.parse())?;
        let config = preset.config().with_input(channels, samples, fs);
        lift(config.validate())?;
        let params = lift(build_with_default_bank(&config, init_seed(seed)))?;
        put(out, Box::into_raw(Box::new(XeegModel { config, params })))
    })
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_load(path: *const c_char, out: *mut *mut XeegModel) -> XeegStatus {
    guard(|| {
        let ck = lift(load_checkpoint(Path::new(c_str(path)?)))?;
        put(out, Box::into_raw(Box::new(XeegModel { config: ck.config, params: ck.params })))
    })
}

/// Write a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_save(model: *const XeegModel, path: *const c_char) -> XeegStatus {
    guard(|| {
        let m = model_ref(model)?;
        lift(save_checkpoint(Path::new(c_str(path)?), &m.config, &m.params))
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_free(model: *mut XeegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape and output sizes of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_shape(
    model: *const XeegModel,
    channels: *mut usize,
    samples: *mut usize,
    n_classes: *mut usize,
    n_features: *mut usize,
) -> XeegStatus {
    guard(|| {
        let m = model_ref(model)?;
        let flat = lift(m.config.shapes())?.flatten;
        put(channels, m.config.channels)?;
        put(samples, m.config.n_samples)?;
        put(n_classes, m.config.n_classes)?;
        put(n_features, flat)
    })
}

/// Trainable and total parameter counts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_count_params(
    model: *const XeegModel,
    trainable: *mut usize,
    total: *mut usize,
) -> XeegStatus {
    guard(|| {
        let pc = lift(model_ref(model)?.config.count_params())?;
        put(trainable, pc.trainable)?;
        put(total, pc.total)
    })
}

unsafe fn batched(
    model: *const XeegModel,
    data: *const f64,
    n_windows: usize,
    out: *mut f64,
    out_len: usize,
    per_window: impl Fn(&ModelConfig) -> xeegnet::Result<usize>,
    run: impl Fn(&ModelConfig, &ModelParams, &[Input<'_>]) -> xeegnet::Result<Vec<f64>>,
) -> XeegStatus {
    guard(|| {
        let m = model_ref(model)?;
        let w = m.config.channels * m.config.n_samples;
        let x = in_slice(data, n_windows * w)?;
        let dst = out_slice(out, out_len, n_windows * lift(per_window(&m.config))?)?;
        if n_windows == 0 {
            return Ok(());
        }
        let inputs: Vec<Input> = x.chunks(w).map(Input::Raw).collect();
        dst.copy_from_slice(&lift(run(&m.config, &m.params, &inputs))?);
        Ok(())
    })
}

/// Eval-mode class probabilities for `n_windows` windows; `out` receives
/// `n_windows × n_classes` values.
///
/// # Safety
/// `data` must hold `n_windows × channels × samples` doubles and `out`
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_predict_proba(
    model: *const XeegModel,
    data: *const f64,
    n_windows: usize,
    out: *mut f64,
    out_len: usize,
) -> XeegStatus {
    batched(model, data, n_windows, out, out_len, |c| Ok(c.n_classes), engine::predict_proba)
}

/// Eval-mode log-power features (`n_windows × n_features`).
///
/// # Safety
/// As for `xeeg_model_predict_proba`.
#[no_mangle]
pub unsafe extern "C" fn xeeg_model_features(
    model: *const XeegModel,
    data: *const f64,
    n_windows: usize,
    out: *mut f64,
    out_len: usize,
) -> XeegStatus {
    batched(model, data, n_windows, out, out_len, |c| Ok(c.shapes()?.flatten), engine::features)
}

/// Design a band-pass FIR kernel of `length` taps for `[f_low, f_high]` Hz.
///
/// # Safety
/// `taps` must hold `taps_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn xeeg_design_bandpass(
    f_low: f64,
    f_high: f64,
    length: usize,
    fs: f64,
    taps: *mut f64,
    taps_len: usize,
) -> XeegStatus {
    guard(|| {
        let k = lift(design_bandpass(&[BandSpec::new("band", f_low, f_high)], length, fs))?;
        out_slice(taps, taps_len, k.taps.len())?.copy_from_slice(&k.taps);
        Ok(())
    })
}

/// Channel-averaged Welch band powers in dB for the seven canonical bands,
/// delta to gamma. `out` must hold 7 values.
///
/// # Safety
/// `data` must hold `channels × samples` doubles.
#[no_mangle]
pub unsafe extern "C" fn xeeg_band_powers(
    data: *const f64,
    channels: usize,
    samples: usize,
    fs: f64,
    out: *mut f64,
    out_len: usize,
) -> XeegStatus {
    guard(|| {
        let x = in_slice(data, channels * samples)?;
        if channels == 0 {
            return Err(fail(XeegStatus::InvalidArgument, "channels must be positive"));
        }
        let psd = lift(welch(x, channels, samples, fs))?;
        let bands: Vec<BandSpec> = Band::ALL.iter().map(|b| b.spec()).collect();
        let bp = lift(band_power(&psd, &bands))?;
        out_slice(out, out_len, bp.len())?.copy_from_slice(&bp);
        Ok(())
    })
}
