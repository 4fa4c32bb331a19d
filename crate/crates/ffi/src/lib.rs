//! C ABI over the dig2dig fusion library.
//!
//! Objects are opaque handles owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`D2dStatus`];
//! on failure, [`d2d_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dig2dig::cli::build_denoiser;
use dig2dig::io::{load_image, save_image};
use dig2dig::metrics::{psnr, GrayImage};
use dig2dig::{fuse, Error, ImageTensor, ModalityStack, RunConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D2dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Divergence = 5,
    Panic = 6,
}

/// A single image in model space, row-major with interleaved channels.
pub struct D2dImage(ImageTensor);

/// Run configuration, edited with the same keys as the command line config file.
pub struct D2dConfig(RunConfig);

/// Output of one fusion run.
pub struct D2dFusion {
    image: ImageTensor,
    trace_csv: String,
    records: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> D2dStatus {
    match e {
        Error::Validation { .. } | Error::ShapeMismatch { .. } | Error::TimestepOutOfRange { .. } => {
            D2dStatus::InvalidArgument
        }
        Error::Config(_) => D2dStatus::Config,
        Error::Divergence { .. } | Error::NonFinite { .. } => D2dStatus::Divergence,
        _ => D2dStatus::Io,
    }
}

struct Failure(D2dStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(D2dStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, recording its error and containing panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> D2dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            D2dStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            D2dStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(D2dStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn d2d_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(s) => s,
        Err(_) => panic!("version contains NUL"),
    };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn d2d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copies `len` values into a new `height x width x channels` image.
///
/// # Safety
/// `data` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut D2dImage,
) -> D2dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        *out = boxed(D2dImage(ImageTensor::new(height, width, channels, values)?));
        Ok(())
    })
}

/// Loads an 8- or 16-bit PNG/PGM/PPM into model space.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_image_load(path: *const c_char, out: *mut *mut D2dImage) -> D2dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        *out = boxed(D2dImage(load_image(Path::new(path))?));
        Ok(())
    })
}

/// Writes an 8-bit image; the format follows the file extension.
///
/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn d2d_image_save(image: *const D2dImage, path: *const c_char) -> D2dStatus {
    guard(|| {
        let image = image.as_ref().ok_or_else(|| null("image"))?;
        let path = str_arg(path, "path")?;
        save_image(Path::new(path), &image.0)?;
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_image_shape(
    image: *const D2dImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> D2dStatus {
    guard(|| {
        let image = image.as_ref().ok_or_else(|| null("image"))?;
        let (h, w, c) = image.0.shape();
        *height.as_mut().ok_or_else(|| null("height"))? = h;
        *width.as_mut().ok_or_else(|| null("width"))? = w;
        *channels.as_mut().ok_or_else(|| null("channels"))? = c;
        Ok(())
    })
}

/// Copies the pixel values into `buf`, which must hold exactly the image size.
///
/// # Safety
/// `image` must be a live handle and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn d2d_image_copy_data(image: *const D2dImage, buf: *mut f64, len: usize) -> D2dStatus {
    guard(|| {
        let image = image.as_ref().ok_or_else(|| null("image"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = image.0.data();
        if len != data.len() {
            return Err(Failure(
                D2dStatus::InvalidArgument,
                format!("buffer holds {len} values, image has {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn d2d_image_free(image: *mut D2dImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// New configuration with library defaults.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_config_new(out: *mut *mut D2dConfig) -> D2dStatus {
    guard(|| {
        *out_arg(out, "out")? = boxed(D2dConfig(RunConfig::default()));
        Ok(())
    })
}

/// Sets one key, e.g. `steps`, `dig_interval`, `oracle`, `seed`.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn d2d_config_set(config: *mut D2dConfig, key: *const c_char, value: *const c_char) -> D2dStatus {
    guard(|| {
        let config = config.as_mut().ok_or_else(|| null("config"))?;
        config.0.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Applies a `key = value` config file on top of the current values.
///
/// # Safety
/// `config` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn d2d_config_load(config: *mut D2dConfig, path: *const c_char) -> D2dStatus {
    guard(|| {
        let config = config.as_mut().ok_or_else(|| null("config"))?;
        config.0.apply_file(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn d2d_config_free(config: *mut D2dConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Fuses `count` same-shaped modalities under `config`.
///
/// # Safety
/// `config` must be a live handle, `modalities` must point to `count` live
/// image handles, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_fuse(
    config: *const D2dConfig,
    modalities: *const *const D2dImage,
    count: usize,
    out: *mut *mut D2dFusion,
) -> D2dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = &config.as_ref().ok_or_else(|| null("config"))?.0;
        if modalities.is_null() {
            return Err(null("modalities"));
        }
        let images = std::slice::from_raw_parts(modalities, count)
            .iter()
            .map(|p| p.as_ref().map(|i| i.0.clone()).ok_or_else(|| null("modalities[i]")))
            .collect::<Result<Vec<_>, _>>()?;
        let ms = if cfg.names.is_empty() {
            ModalityStack::unnamed(images)?
        } else {
            ModalityStack::new(images, cfg.names.clone())?
        };
        let d = build_denoiser(cfg, &ms)?;
        let result = fuse(&ms, d.as_ref(), &cfg.schedule()?, &cfg.fusion)?;
        *out = boxed(D2dFusion {
            image: result.image,
            trace_csv: result.trace.to_csv(),
            records: result.trace.len(),
        });
        Ok(())
    })
}

/// Copies the fused image into a new image handle.
///
/// # Safety
/// `fusion` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_fusion_image(fusion: *const D2dFusion, out: *mut *mut D2dImage) -> D2dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let fusion = fusion.as_ref().ok_or_else(|| null("fusion"))?;
        *out = boxed(D2dImage(fusion.image.clone()));
        Ok(())
    })
}

/// Number of gain records in the run trace; 0 for a null handle.
///
/// # Safety
/// `fusion` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn d2d_fusion_records(fusion: *const D2dFusion) -> usize {
    fusion.as_ref().map_or(0, |f| f.records)
}

/// The run trace as CSV in a new string released with [`d2d_string_free`].
///
/// # Safety
/// `fusion` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_fusion_trace_csv(fusion: *const D2dFusion, out: *mut *mut c_char) -> D2dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let fusion = fusion.as_ref().ok_or_else(|| null("fusion"))?;
        let s = CString::new(fusion.trace_csv.as_str())
            .map_err(|_| Failure(D2dStatus::InvalidArgument, "trace contains NUL".into()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `fusion` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn d2d_fusion_free(fusion: *mut D2dFusion) {
    if !fusion.is_null() {
        drop(Box::from_raw(fusion));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn d2d_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Peak-255 PSNR of two images after conversion to 8-bit gray; `+inf` when equal.
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn d2d_psnr(a: *const D2dImage, b: *const D2dImage, out: *mut f64) -> D2dStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = psnr(&GrayImage::from_model(&a.0)?, &GrayImage::from_model(&b.0)?)?;
        Ok(())
    })
}
