//! C ABI over the dcseg engine.
//!
//! Every function returns a [`DcsegStatus`]. On failure the message is
//! available from [`dcseg_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use dcseg::dataio::load_model;
use dcseg::engine::{Engine, EngineConfig, Mode};
use dcseg::numerics::ParamVector;
use dcseg::segmenter::{init_params, Click, Image, Sign};
use dcseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Structural = 3,
    AdaptationStep = 4,
    Input = 5,
    Config = 6,
    Protocol = 7,
    Format = 8,
    Dataset = 9,
    Pretrain = 10,
    Io = 11,
    Json = 12,
    BufferTooSmall = 13,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcsegMode {
    Baseline = 0,
    NaiveTta = 1,
    DcOnly = 2,
    DcTtaNoMerge = 3,
    DcTta = 4,
}

impl From<DcsegMode> for Mode {
    fn from(m: DcsegMode) -> Self {
        match m {
            DcsegMode::Baseline => Mode::Baseline,
            DcsegMode::NaiveTta => Mode::NaiveTta,
            DcsegMode::DcOnly => Mode::DcOnly,
            DcsegMode::DcTtaNoMerge => Mode::DcTtaNoMerge,
            DcsegMode::DcTta => Mode::DcTta,
        }
    }
}

/// Pretrained parameters. Shareable across sessions.
pub struct DcsegModel {
    params: Arc<ParamVector>,
    hash: CString,
}

/// One interactive session.
pub struct DcsegSession {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> DcsegStatus {
    match e {
        Error::Structural(_) => DcsegStatus::Structural,
        Error::AdaptationStep(_) => DcsegStatus::AdaptationStep,
        Error::Input(_) => DcsegStatus::Input,
        Error::Config(_) => DcsegStatus::Config,
        Error::Protocol(_) => DcsegStatus::Protocol,
        Error::Format(_) => DcsegStatus::Format,
        Error::Dataset { .. } => DcsegStatus::Dataset,
        Error::Pretrain { .. } => DcsegStatus::Pretrain,
        Error::Io(_) => DcsegStatus::Io,
        Error::Json(_) => DcsegStatus::Json,
    }
}

struct Fail(DcsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DcsegStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcsegStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DcsegStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DcsegStatus::NullPointer, format!("{what} is null"))
}

unsafe fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn nonnull_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next dcseg call on this thread.
#[no_mangle]
pub extern "C" fn dcseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcseg_model_load(path: *const c_char, out: *mut *mut DcsegModel) -> DcsegStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        let path = CStr::from_ptr(nonnull(path, "path")?)
            .to_str()
            .map_err(|_| Fail(DcsegStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (params, hash) = load_model(Path::new(path))?;
        let hash = CString::new(hash).expect("hex has no nul");
        *out = Box::into_raw(Box::new(DcsegModel { params: Arc::new(params), hash }));
        Ok(())
    })
}

/// An untrained model from a seed, for tests.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcseg_model_init(seed: u64, out: *mut *mut DcsegModel) -> DcsegStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        let params = init_params(seed);
        let hash = dcseg::dataio::model_hash(&dcseg::dataio::encode_model(&params));
        *out = Box::into_raw(Box::new(DcsegModel { params: Arc::new(params), hash: CString::new(hash).unwrap() }));
        Ok(())
    })
}

/// Hex SHA-256 of the model file. Owned by the model.
///
/// # Safety
/// `model` must come from `dcseg_model_load` or `dcseg_model_init`.
#[no_mangle]
pub unsafe extern "C" fn dcseg_model_hash(model: *const DcsegModel) -> *const c_char {
    match model.as_ref() {
        Some(m) => m.hash.as_ptr(),
        None => std::ptr::null(),
    }
}

/// # Safety
/// `model` must be null or an unfreed model handle. Sessions keep their own
/// reference, so freeing the model while sessions live is allowed.
#[no_mangle]
pub unsafe extern "C" fn dcseg_model_free(model: *mut DcsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Starts a session on an 8-bit interleaved RGB image of `width * height * 3` bytes.
///
/// # Safety
/// `rgb` must point to `rgb_len` readable bytes; `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dcseg_session_new(
    model: *const DcsegModel,
    rgb: *const u8,
    rgb_len: usize,
    width: u32,
    height: u32,
    mode: DcsegMode,
    out: *mut *mut DcsegSession,
) -> DcsegStatus {
    guard(|| {
        let model = nonnull(model, "model")?;
        let out = nonnull_mut(out, "out")?;
        let rgb = nonnull(rgb, "rgb")?;
        let (w, h) = (width as usize, height as usize);
        if w.checked_mul(h).and_then(|n| n.checked_mul(3)) != Some(rgb_len) {
            return Err(Fail(DcsegStatus::InvalidArgument, format!("expected {w}x{h}x3 bytes, got {rgb_len}")));
        }
        let bytes = std::slice::from_raw_parts(rgb, rgb_len);
        let image = Image::new(w, h, bytes.iter().map(|&b| b as f64 / 255.0).collect())?;
        let engine = Engine::new(Arc::new(image), Arc::clone(&model.params), mode.into(), EngineConfig::default())?;
        *out = Box::into_raw(Box::new(DcsegSession { engine }));
        Ok(())
    })
}

/// # Safety
/// `session` must be null or an unfreed session handle.
#[no_mangle]
pub unsafe extern "C" fn dcseg_session_free(session: *mut DcsegSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Applies one click and writes the resulting mask, one byte (0 or 1) per
/// pixel in row-major order. A failed click leaves the session unchanged.
///
/// # Safety
/// `session` must be valid and `mask_out` must point to `mask_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dcseg_session_click(
    session: *mut DcsegSession,
    x: u32,
    y: u32,
    positive: bool,
    mask_out: *mut u8,
    mask_len: usize,
) -> DcsegStatus {
    guard(|| {
        let session = nonnull_mut(session, "session")?;
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        let scene = session.engine.scene();
        let n = scene.width() * scene.height();
        if mask_len < n {
            return Err(Fail(DcsegStatus::BufferTooSmall, format!("mask buffer holds {mask_len} of {n} bytes")));
        }
        let sign = if positive { Sign::Positive } else { Sign::Negative };
        let outcome = session.engine.step(Click::new(x, y, sign, 0))?;
        let dst = std::slice::from_raw_parts_mut(mask_out, n);
        for (d, &b) in dst.iter_mut().zip(outcome.mask.bits()) {
            *d = b as u8;
        }
        Ok(())
    })
}

/// Back to the pretrained model with no clicks.
///
/// # Safety
/// `session` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dcseg_session_reset(session: *mut DcsegSession) -> DcsegStatus {
    guard(|| {
        nonnull_mut(session, "session")?.engine.reset();
        Ok(())
    })
}

/// Number of clicks applied so far.
///
/// # Safety
/// `session` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcseg_session_iteration(session: *const DcsegSession, out: *mut usize) -> DcsegStatus {
    guard(|| {
        *nonnull_mut(out, "out")? = nonnull(session, "session")?.engine.iteration();
        Ok(())
    })
}

/// Number of segmentation units, the global one included.
///
/// # Safety
/// `session` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcseg_session_unit_count(session: *const DcsegSession, out: *mut usize) -> DcsegStatus {
    guard(|| {
        *nonnull_mut(out, "out")? = nonnull(session, "session")?.engine.units().len();
        Ok(())
    })
}
