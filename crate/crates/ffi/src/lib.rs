//! C interface to the attribution toolkit.
//!
//! Every function returns a [`ForgradStatus`]; on failure a message is kept
//! per thread and can be read with [`forgrad_last_error`]. Models are opaque
//! handles created by `forgrad_model_*` constructors and released with
//! [`forgrad_model_free`]. Images are passed as row-major `C x H x W` arrays
//! of `double`; attribution maps come back as `H x W` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use forgrad::attribution::{attribute, Method, MethodConfig};
use forgrad::metrics::{faithfulness, MetricConfig};
use forgrad::nn::io::model_from_bytes;
use forgrad::nn::{load_model, model_hash, Network, Preset};
use forgrad::repair::{attribute_filtered, FilterMode};
use forgrad::spectral::{lowpass, power_slope, radial_signature};
use forgrad::{Error, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgradStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed file or buffer.
    Format = 3,
    Io = 4,
    ShapeMismatch = 5,
    /// A computation produced a non-finite value or too little data.
    Numeric = 6,
    Unsupported = 7,
    /// Output buffer too small; the message names the required size.
    BufferTooSmall = 8,
    Panic = 9,
}

/// Filtering mode for [`forgrad_attribute`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgradMode {
    Gradient = 0,
    Map = 1,
}

/// Opaque model handle.
pub struct ForgradModel {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> ForgradStatus {
    match e {
        Error::Format(_) | Error::Version(_) | Error::Json(_) | Error::CountMismatch { .. } => ForgradStatus::Format,
        Error::Io(_) => ForgradStatus::Io,
        Error::ShapeMismatch { .. } | Error::StaleCache(_) => ForgradStatus::ShapeMismatch,
        Error::NonFinite(_)
        | Error::Divergence { .. }
        | Error::InsufficientBins(_)
        | Error::ImaginaryResidual(_)
        | Error::DegenerateMasks => ForgradStatus::Numeric,
        Error::UnsupportedMethod(_) | Error::NotAConvLayer(_) => ForgradStatus::Unsupported,
        _ => ForgradStatus::InvalidArgument,
    }
}

struct Fail(ForgradStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ForgradStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ForgradStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ForgradStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ForgradStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ForgradStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const ForgradModel) -> Result<&'a Network, Fail> {
    m.as_ref().map(|m| &m.net).ok_or_else(|| null("model"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

fn input_tensor(net: &Network, data: &[f64]) -> Result<Tensor, Fail> {
    let shape = net.input_shape().to_vec();
    let need: usize = shape.iter().product();
    if data.len() != need {
        return Err(Fail(
            ForgradStatus::ShapeMismatch,
            format!("input holds {} values, model expects {need}", data.len()),
        ));
    }
    Ok(Tensor::new(shape, data.to_vec())?)
}

unsafe fn put_model(out: *mut *mut ForgradModel, net: Network) -> Result<(), Fail> {
    write_out(out, Box::into_raw(Box::new(ForgradModel { net })), "out")
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn forgrad_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn forgrad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn forgrad_model_load(path: *const c_char, out: *mut *mut ForgradModel) -> ForgradStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put_model(out, load_model(path)?)
    })
}

/// Parses a model from an in-memory buffer.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn forgrad_model_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut ForgradModel,
) -> ForgradStatus {
    guard(|| {
        let bytes = slice_arg(bytes, len, "bytes")?;
        put_model(out, model_from_bytes(bytes)?)
    })
}

/// Builds an untrained preset (`cnn-max`, `cnn-avg`, `cnn-strideN`, `linear`).
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn forgrad_model_build(
    preset: *const c_char,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut ForgradModel,
) -> ForgradStatus {
    guard(|| {
        let preset: Preset = str_arg(preset, "preset")?.parse()?;
        put_model(out, preset.build([channels, height, width], num_classes, seed)?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a `forgrad_model_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn forgrad_model_free(model: *mut ForgradModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[C, H, W]` to `shape` and the class count to `num_classes`.
///
/// # Safety
/// `model` must be a live handle; `shape` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn forgrad_model_info(
    model: *const ForgradModel,
    shape: *mut usize,
    num_classes: *mut usize,
) -> ForgradStatus {
    guard(|| {
        let net = model_arg(model)?;
        out_slice(shape, 3, "shape")?.copy_from_slice(&net.input_shape());
        write_out(num_classes, net.num_classes(), "num_classes")
    })
}

/// Writes the hex SHA-256 of the serialized model (64 chars plus NUL).
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn forgrad_model_hash(model: *const ForgradModel, buf: *mut c_char, len: usize) -> ForgradStatus {
    guard(|| {
        let hash = model_hash(model_arg(model)?);
        let out = out_slice(buf, len, "buf")?;
        if len < hash.len() + 1 {
            return Err(Fail(ForgradStatus::BufferTooSmall, format!("need {} bytes", hash.len() + 1)));
        }
        for (o, b) in out.iter_mut().zip(hash.bytes()) {
            *o = b as c_char;
        }
        out[hash.len()] = 0;
        Ok(())
    })
}

/// Logits for one image. `logits` must hold `num_classes` values.
///
/// # Safety
/// `input` must hold `input_len` values and `logits` `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn forgrad_logits(
    model: *const ForgradModel,
    input: *const f64,
    input_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> ForgradStatus {
    guard(|| {
        let net = model_arg(model)?;
        let x = input_tensor(net, slice_arg(input, input_len, "input")?)?;
        let l = net.logits(&x)?;
        if logits_len != l.len() {
            return Err(invalid(format!("logits buffer holds {logits_len}, need {}", l.len())));
        }
        out_slice(logits, logits_len, "logits")?.copy_from_slice(l.data());
        Ok(())
    })
}

/// Predicted class for one image.
///
/// # Safety
/// `input` must hold `input_len` values; `class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn forgrad_predict(
    model: *const ForgradModel,
    input: *const f64,
    input_len: usize,
    class: *mut usize,
) -> ForgradStatus {
    guard(|| {
        let net = model_arg(model)?;
        let x = input_tensor(net, slice_arg(input, input_len, "input")?)?;
        write_out(class, net.forward(&x)?.predicted_class(), "class")
    })
}

/// Attribution map (`H x W`) for `class`. A negative or NaN `sigma` means no
/// filtering; otherwise high frequencies beyond `sigma` are removed in the
/// given mode. `method` takes the command-line names (`saliency`,
/// `smoothgrad`, `integrated-gradients`, ...).
///
/// # Safety
/// `input` must hold `input_len` values, `map` `map_len` values, and
/// `method` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn forgrad_attribute(
    model: *const ForgradModel,
    input: *const f64,
    input_len: usize,
    class: usize,
    method: *const c_char,
    sigma: f64,
    mode: ForgradMode,
    seed: u64,
    map: *mut f64,
    map_len: usize,
) -> ForgradStatus {
    guard(|| {
        let net = model_arg(model)?;
        let x = input_tensor(net, slice_arg(input, input_len, "input")?)?;
        let method: Method = str_arg(method, "method")?.parse()?;
        let cfg = MethodConfig {
            seed,
            ..MethodConfig::default()
        };
        let result = if sigma.is_nan() || sigma < 0.0 {
            attribute(net, &x, class, method, &cfg)?
        } else {
            let mode = match mode {
                ForgradMode::Gradient => FilterMode::Gradient,
                ForgradMode::Map => FilterMode::Map,
            };
            attribute_filtered(net, &x, class, method, &cfg, sigma, mode)?
        };
        if map_len != result.values.len() {
            return Err(invalid(format!("map buffer holds {map_len}, need {}", result.values.len())));
        }
        out_slice(map, map_len, "map")?.copy_from_slice(result.values.data());
        Ok(())
    })
}

/// Ideal low-pass of an `H x W` map keeping radius `<= sigma / 2`.
///
/// # Safety
/// `map` and `out` must each hold `height * width` values.
#[no_mangle]
pub unsafe extern "C" fn forgrad_lowpass(
    map: *const f64,
    height: usize,
    width: usize,
    sigma: f64,
    out: *mut f64,
) -> ForgradStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| invalid("size overflow"))?;
        let t = Tensor::new(vec![height, width], slice_arg(map, n, "map")?.to_vec())?;
        out_slice(out, n, "out")?.copy_from_slice(lowpass(&t, sigma)?.data());
        Ok(())
    })
}

/// Power/frequency slope of the radial signature of `count` maps of size
/// `H x W`, stored back to back.
///
/// # Safety
/// `maps` must hold `count * height * width` values; `slope` must be writable.
#[no_mangle]
pub unsafe extern "C" fn forgrad_power_slope(
    maps: *const f64,
    count: usize,
    height: usize,
    width: usize,
    slope: *mut f64,
) -> ForgradStatus {
    guard(|| {
        let plane = height.checked_mul(width).ok_or_else(|| invalid("size overflow"))?;
        let total = plane.checked_mul(count).ok_or_else(|| invalid("size overflow"))?;
        let data = slice_arg(maps, total, "maps")?;
        let tensors = data
            .chunks_exact(plane.max(1))
            .map(|c| Tensor::new(vec![height, width], c.to_vec()))
            .collect::<forgrad::Result<Vec<_>>>()?;
        let fit = power_slope(&radial_signature(&tensors)?)?;
        write_out(slope, fit.slope, "slope")
    })
}

/// Faithfulness (insertion minus deletion AUC) of `map` for `class`, with
/// default metric settings and a zero baseline.
///
/// # Safety
/// `input` must hold `input_len` values and `map` `map_len` values.
#[no_mangle]
pub unsafe extern "C" fn forgrad_faithfulness(
    model: *const ForgradModel,
    input: *const f64,
    input_len: usize,
    map: *const f64,
    map_len: usize,
    class: usize,
    score: *mut f64,
) -> ForgradStatus {
    guard(|| {
        let net = model_arg(model)?;
        let x = input_tensor(net, slice_arg(input, input_len, "input")?)?;
        let [_, h, w] = net.input_shape();
        if map_len != h * w {
            return Err(invalid(format!("map holds {map_len}, need {}", h * w)));
        }
        let m = Tensor::new(vec![h, w], slice_arg(map, map_len, "map")?.to_vec())?;
        let f = faithfulness(net, &x, &m, class, &MetricConfig::default())?;
        write_out(score, f, "score")
    })
}
