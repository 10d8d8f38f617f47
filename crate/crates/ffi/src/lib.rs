//! C ABI over `sagiri-core`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_load`/`*_new` call and released by the matching `*_free`. Functions
//! return a [`SagiriStatus`]; on failure the message is available from
//! [`sagiri_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sagiri_core::checkpoint::ModelBundle;
use sagiri_core::diffusion::NoiseSchedule;
use sagiri_core::imaging::{detect_unknown_mask, load_image, save_image, ColorSpace, ImageBuffer, RegionMask, SaturationMode, ValueRange};
use sagiri_core::restorer::{restore, Restorer};
use sagiri_core::sagiri::{refine, RefineOptions, SagiriModels};
use sagiri_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SagiriStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    Checkpoint = 7,
    Runtime = 8,
    Panic = 9,
}

/// Decoded image, 3 channels.
pub struct SagiriImage(ImageBuffer);

/// Binary unknown-region mask.
pub struct SagiriMask(RegionMask);

/// Stage-one restorer.
pub struct SagiriRestorer(Restorer);

/// VAE, control-conditioned denoiser and noise schedule.
pub struct SagiriRefiner {
    models: SagiriModels,
    sched: NoiseSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SagiriStatus {
    match e {
        Error::NotFound(_) => SagiriStatus::NotFound,
        Error::Io { .. } => SagiriStatus::Io,
        Error::UnsupportedFormat(_) | Error::CorruptHeader(_) | Error::CorruptPayload(_) => SagiriStatus::Format,
        Error::ShapeMismatch { .. } | Error::ValueRange { .. } => SagiriStatus::Shape,
        Error::Checkpoint(_) => SagiriStatus::Checkpoint,
        Error::InvalidConfig(_) | Error::InvariantViolation(_) => SagiriStatus::InvalidArgument,
        _ => SagiriStatus::Runtime,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SagiriStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SagiriStatus::Ok,
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("`{name}` is null"));
            SagiriStatus::NullArgument
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            SagiriStatus::InvalidArgument
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
            SagiriStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Fail> {
    Ok(PathBuf::from(str_arg(p, name)?))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("`{name}` is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn clear_out<T>(out: *mut *mut T) {
    if !out.is_null() {
        *out = ptr::null_mut();
    }
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn sagiri_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn sagiri_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a PNG or PFM file. HDR files are rejected.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sagiri_image_load(path: *const c_char, out: *mut *mut SagiriImage) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        let img = load_image(path_arg(path, "path")?)?;
        if img.range() == ValueRange::HdrLinear {
            return Err(Fail::Arg("expected an LDR image".into()));
        }
        put(out, SagiriImage(img.to_rgb()))
    })
}

/// Wraps `height * width * 3` interleaved 8-bit sRGB samples (copied).
///
/// # Safety
/// `data` must point to `width * height * 3` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn sagiri_image_from_rgb8(
    data: *const u8,
    width: usize,
    height: usize,
    out: *mut *mut SagiriImage,
) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .filter(|&n| n > 0)
            .ok_or_else(|| Fail::Arg(format!("bad size {width}x{height}")))?;
        let samples = std::slice::from_raw_parts(data, n).iter().map(|&v| v as f32).collect();
        let img = ImageBuffer::new(width, height, 3, samples, ValueRange::Byte, ColorSpace::Srgb)?;
        put(out, SagiriImage(img))
    })
}

/// # Safety
/// `img` must be null or a live image handle.
#[no_mangle]
pub unsafe extern "C" fn sagiri_image_width(img: *const SagiriImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// # Safety
/// `img` must be null or a live image handle.
#[no_mangle]
pub unsafe extern "C" fn sagiri_image_height(img: *const SagiriImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.height())
}

/// Copies the image as interleaved 8-bit RGB into `buf` (`len >= width * height * 3`).
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sagiri_image_copy_rgb8(img: *const SagiriImage, buf: *mut u8, len: usize) -> SagiriStatus {
    guard(|| {
        let img = obj(img, "img")?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let bytes = img.0.to_byte()?;
        let data = bytes.data();
        if len < data.len() {
            return Err(Fail::Arg(format!("buffer holds {len} bytes, need {}", data.len())));
        }
        let dst = std::slice::from_raw_parts_mut(buf, data.len());
        for (d, &s) in dst.iter_mut().zip(data) {
            *d = s as u8;
        }
        Ok(())
    })
}

/// Writes the image as PNG.
///
/// # Safety
/// `img` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sagiri_image_save(img: *const SagiriImage, path: *const c_char) -> SagiriStatus {
    guard(|| {
        let img = obj(img, "img")?;
        save_image(&img.0, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sagiri_image_free(img: *mut SagiriImage) {
    free(img)
}

/// Marks pixels with any channel at 0 or 255 as unknown.
///
/// # Safety
/// `img` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sagiri_mask_detect(img: *const SagiriImage, out: *mut *mut SagiriMask) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        let img = obj(img, "img")?;
        let mask = detect_unknown_mask(&img.0.to_byte()?, SaturationMode::AllChannels)?;
        put(out, SagiriMask(mask))
    })
}

/// Loads a mask image; white (nonzero) pixels are unknown.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sagiri_mask_load(path: *const c_char, out: *mut *mut SagiriMask) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        let mask = RegionMask::load(path_arg(path, "path")?)?;
        put(out, SagiriMask(mask))
    })
}

/// Share of unknown pixels in `[0, 1]`, or -1 for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sagiri_mask_unknown_fraction(mask: *const SagiriMask) -> f64 {
    mask.as_ref().map_or(-1.0, |m| m.0.unknown_fraction())
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sagiri_mask_free(mask: *mut SagiriMask) {
    free(mask)
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sagiri_restorer_load(path: *const c_char, out: *mut *mut SagiriRestorer) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        let bundle = ModelBundle::load(path_arg(path, "path")?)?;
        put(out, SagiriRestorer(Restorer::from_bundle(&bundle)?))
    })
}

/// Stage-one restoration of `img` into a new image.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sagiri_restorer_apply(
    restorer: *const SagiriRestorer,
    img: *const SagiriImage,
    out: *mut *mut SagiriImage,
) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        let r = obj(restorer, "restorer")?;
        let img = obj(img, "img")?;
        put(out, SagiriImage(restore(&r.0, &img.0)?))
    })
}

/// # Safety
/// `restorer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sagiri_restorer_free(restorer: *mut SagiriRestorer) {
    free(restorer)
}

/// Loads the VAE and refiner checkpoints with the default noise schedule.
///
/// # Safety
/// Paths must be nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sagiri_refiner_load(
    vae_path: *const c_char,
    sagiri_path: *const c_char,
    out: *mut *mut SagiriRefiner,
) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        let vae = ModelBundle::load(path_arg(vae_path, "vae_path")?)?;
        let net = ModelBundle::load(path_arg(sagiri_path, "sagiri_path")?)?;
        put(
            out,
            SagiriRefiner {
                models: SagiriModels::from_bundles(&vae, &net)?,
                sched: NoiseSchedule::default(),
            },
        )
    })
}

/// Refines `img`. `prompt` and `mask` may be null; without a mask the
/// clipped pixels of `img` are regenerated. `n_steps` of 0 selects the default.
///
/// # Safety
/// Non-null pointers must be live handles or nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sagiri_refiner_refine(
    refiner: *const SagiriRefiner,
    img: *const SagiriImage,
    prompt: *const c_char,
    mask: *const SagiriMask,
    n_steps: usize,
    seed: u64,
    out: *mut *mut SagiriImage,
) -> SagiriStatus {
    clear_out(out);
    guard(|| {
        let r = obj(refiner, "refiner")?;
        let img = obj(img, "img")?;
        let prompt = if prompt.is_null() { None } else { Some(str_arg(prompt, "prompt")?) };
        let mask = mask.as_ref().map(|m| &m.0);
        let defaults = RefineOptions::default();
        let opts = RefineOptions {
            n_steps: if n_steps == 0 { defaults.n_steps } else { n_steps },
            seed,
            ..defaults
        };
        put(out, SagiriImage(refine(&img.0, prompt, mask, &r.models, &r.sched, &opts)?))
    })
}

/// # Safety
/// `refiner` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sagiri_refiner_free(refiner: *mut SagiriRefiner) {
    free(refiner)
}
