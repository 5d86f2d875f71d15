//! C ABI over the `cadunet` enhancer.
//!
//! Every function returns a [`CadunetStatus`]; on failure a message is
//! available from [`cadunet_last_error`] on the same thread. Handles are
//! opaque and must be released with [`cadunet_model_free`]. Signals are
//! interleaved `frames × channels` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cadunet::error::Error;
use cadunet::eval::si_sdr;
use cadunet::network::{enhance, Model, UNetConfig};
use cadunet::stft::{CodecConfig, StftCodec};
use cadunet::training::{AdamConfig, AdamState, AnyCheckpoint, Checkpoint};
use cadunet::{Real, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CadunetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CadunetPreset {
    Paper = 0,
    Tiny = 1,
}

/// A model with its codec.
pub struct CadunetModel {
    inner: Inner,
}

enum Inner {
    F32(Checkpoint<f32>, StftCodec<f32>),
    F64(Checkpoint<f64>, StftCodec<f64>),
}

impl Inner {
    fn from_checkpoint(ckpt: AnyCheckpoint) -> Result<Self, Error> {
        Ok(match ckpt {
            AnyCheckpoint::F32(c) => {
                let codec = StftCodec::new(c.codec)?;
                Inner::F32(c, codec)
            }
            AnyCheckpoint::F64(c) => {
                let codec = StftCodec::new(c.codec)?;
                Inner::F64(c, codec)
            }
        })
    }

    fn config(&self) -> &UNetConfig {
        match self {
            Inner::F32(c, _) => c.model.config(),
            Inner::F64(c, _) => c.model.config(),
        }
    }

    fn codec(&self) -> &CodecConfig {
        match self {
            Inner::F32(_, k) => k.config(),
            Inner::F64(_, k) => k.config(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CadunetStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => CadunetStatus::Shape,
        Error::InvalidConfig { .. } | Error::Degenerate { .. } => CadunetStatus::InvalidArgument,
        Error::NonFinite { .. } => CadunetStatus::NonFinite,
        Error::Format { .. } | Error::Unsupported { .. } | Error::Json(_) => CadunetStatus::Format,
        Error::Io { .. } => CadunetStatus::Io,
    }
}

struct Fail(CadunetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CadunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CadunetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            CadunetStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CadunetStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CadunetStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const CadunetModel) -> Result<&'a CadunetModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cadunet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn cadunet_status_str(status: CadunetStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CadunetStatus::Ok => c"ok",
        CadunetStatus::NullPointer => c"null pointer",
        CadunetStatus::InvalidArgument => c"invalid argument",
        CadunetStatus::Io => c"i/o error",
        CadunetStatus::Format => c"malformed data",
        CadunetStatus::Shape => c"shape mismatch",
        CadunetStatus::NonFinite => c"non-finite value",
        CadunetStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn cadunet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cadunet_model_load(path: *const c_char, out: *mut *mut CadunetModel) -> CadunetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let inner = Inner::from_checkpoint(AnyCheckpoint::load(&path)?)?;
        *out = Box::into_raw(Box::new(CadunetModel { inner }));
        Ok(())
    })
}

/// Creates an untrained single-precision model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cadunet_model_new(preset: CadunetPreset, seed: u64, out: *mut *mut CadunetModel) -> CadunetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (unet, codec) = match preset {
            CadunetPreset::Paper => (UNetConfig::paper(), CodecConfig::default()),
            CadunetPreset::Tiny => (UNetConfig::tiny(), CodecConfig::for_bins(UNetConfig::tiny().freq_bins)),
        };
        let model = Model::<f32>::new(unet, seed)?;
        let adam = AdamState::new(AdamConfig::default(), model.params());
        let ckpt = Checkpoint {
            model,
            codec,
            alpha: None,
            step: 0,
            rng: None,
            adam,
        };
        let inner = Inner::from_checkpoint(AnyCheckpoint::F32(ckpt))?;
        *out = Box::into_raw(Box::new(CadunetModel { inner }));
        Ok(())
    })
}

/// Writes the model as a checkpoint.
///
/// # Safety
/// `model` must come from this library and `path` be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn cadunet_model_save(model: *const CadunetModel, path: *const c_char) -> CadunetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path)?;
        match &m.inner {
            Inner::F32(c, _) => c.save(&path)?,
            Inner::F64(c, _) => c.save(&path)?,
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cadunet_model_free(model: *mut CadunetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Microphone channels the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cadunet_model_channels(model: *const CadunetModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().channels)
}

/// Samples per processing segment, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cadunet_model_segment_len(model: *const CadunetModel) -> usize {
    model.as_ref().map_or(0, |m| {
        m.inner.codec().samples_for_frames(m.inner.config().frames).unwrap_or(0)
    })
}

/// Bytes per stored parameter (4 or 8), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn cadunet_model_precision(model: *const CadunetModel) -> usize {
    model.as_ref().map_or(0, |m| match m.inner {
        Inner::F32(..) => 4,
        Inner::F64(..) => 8,
    })
}

fn run_enhance<T: Real>(model: &Model<T>, codec: &StftCodec<T>, y: &[f32], frames: usize, channels: usize) -> Result<(Vec<f32>, Vec<f32>), Error> {
    let y = Tensor::new(&[frames, channels], y.iter().map(|&v| T::of(v as f64)).collect())?;
    let (s, n) = enhance(model, codec, &y)?;
    let back = |t: Tensor<T>| t.data().iter().map(|v| v.f64() as f32).collect();
    Ok((back(s), back(n)))
}

/// Separates `input` into speech and noise estimates. The three buffers
/// hold `frames × channels` interleaved samples; outputs are fully written
/// on success and untouched on failure.
///
/// # Safety
/// `input`, `speech` and `noise` must each point to `frames × channels`
/// floats; the outputs must not overlap the input.
#[no_mangle]
pub unsafe extern "C" fn cadunet_enhance(
    model: *const CadunetModel,
    input: *const f32,
    frames: usize,
    channels: usize,
    speech: *mut f32,
    noise: *mut f32,
) -> CadunetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input.is_null() || speech.is_null() || noise.is_null() {
            return Err(null("signal buffer"));
        }
        if frames == 0 {
            return Err(Fail(CadunetStatus::InvalidArgument, "frames must be positive".into()));
        }
        let expected = m.inner.config().channels;
        if channels != expected {
            return Err(Fail(
                CadunetStatus::Shape,
                format!("model expects {expected} channels, got {channels}"),
            ));
        }
        let len = frames
            .checked_mul(channels)
            .ok_or_else(|| Fail(CadunetStatus::InvalidArgument, "frames × channels overflows".into()))?;
        let y = std::slice::from_raw_parts(input, len);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Fail(CadunetStatus::NonFinite, "input contains NaN or infinity".into()));
        }
        let (s, n) = match &m.inner {
            Inner::F32(c, k) => run_enhance(&c.model, k, y, frames, channels)?,
            Inner::F64(c, k) => run_enhance(&c.model, k, y, frames, channels)?,
        };
        std::slice::from_raw_parts_mut(speech, len).copy_from_slice(&s);
        std::slice::from_raw_parts_mut(noise, len).copy_from_slice(&n);
        Ok(())
    })
}

/// Scale-invariant SDR of `estimate` against `reference` in dB.
///
/// # Safety
/// Both arrays must hold `len` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cadunet_si_sdr(estimate: *const f64, reference: *const f64, len: usize, out: *mut f64) -> CadunetStatus {
    guard(|| {
        if estimate.is_null() || reference.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let e = std::slice::from_raw_parts(estimate, len);
        let r = std::slice::from_raw_parts(reference, len);
        *out = si_sdr(e, r)?;
        Ok(())
    })
}
