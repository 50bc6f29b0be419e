//! C interface to `resinv-core`.
//!
//! Models and inverted images are opaque handles created and released by
//! paired `*_load`/`*_free` or `*_invert`/`*_free` calls. Every fallible
//! function returns a [`ResinvStatus`]; on failure the message is kept per
//! thread and can be copied out with [`resinv_last_error`]. Images cross the
//! boundary as `RESINV_PIXELS` row-major floats in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use resinv_core::bimd::{bimd_sample, BimdConfig, FlowBundle};
use resinv_core::data::{IdentityParams, Provenance, RenderedImage, PIXELS};
use resinv_core::denoiser::{load_weights, Conditioning, DenoiserParams, ModelKind};
use resinv_core::inversion::reconstruct_res;
use resinv_core::pipeline::{enhance, EnhanceRequest};
use resinv_core::Error;

/// Floats per image (16 x 16).
pub const RESINV_PIXELS: usize = 256;
const _: () = assert!(RESINV_PIXELS == PIXELS);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResinvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Panic = 6,
    Internal = 7,
}

/// A loaded denoiser.
pub struct ResinvModel {
    params: DenoiserParams,
}

/// An image inverted into a model's trajectory space, with its residuals.
pub struct ResinvBundle {
    bundle: FlowBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> ResinvStatus {
    match err {
        Error::Shape { .. } | Error::Invalid(_) | Error::Timestep { .. } => ResinvStatus::InvalidArgument,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::NtiDiverged { .. } | Error::NonFiniteLatent(_) => {
            ResinvStatus::Numeric
        }
        Error::Format(_) | Error::Version { .. } | Error::Json(_) => ResinvStatus::Format,
        Error::Io { .. } => ResinvStatus::Io,
        Error::Stage { source, .. } => status_of(source),
        Error::Unreachable(_) => ResinvStatus::Internal,
    }
}

struct Fail(ResinvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ResinvStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ResinvStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ResinvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ResinvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            ResinvStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const ResinvModel) -> Result<&'a DenoiserParams, Fail> {
    model.as_ref().map(|m| &m.params).ok_or_else(|| null("model"))
}

unsafe fn image_in(pixels: *const f32, len: usize) -> Result<RenderedImage, Fail> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if len != PIXELS {
        return Err(invalid(format!("image has {len} values, expected {PIXELS}")));
    }
    let values = std::slice::from_raw_parts(pixels, len).to_vec();
    Ok(RenderedImage::new(values, Provenance::Reference)?)
}

unsafe fn image_out(image: &RenderedImage, out: *mut f32, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len < PIXELS {
        return Err(invalid(format!("output buffer holds {len} values, need {PIXELS}")));
    }
    std::slice::from_raw_parts_mut(out, PIXELS).copy_from_slice(image.pixels());
    Ok(())
}

fn identity(index: i64) -> Result<Option<IdentityParams>, Fail> {
    if index < 0 {
        return Ok(None);
    }
    Ok(Some(IdentityParams::from_index(index as usize)?))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn resinv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes) and returns the full message
/// length in bytes. `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn resinv_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// Loads a weight file written by `resinv train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a model that must be released with
/// [`resinv_model_free`].
#[no_mangle]
pub unsafe extern "C" fn resinv_model_load(path: *const c_char, out: *mut *mut ResinvModel) -> ResinvStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let params = load_weights(Path::new(path))?;
        *out = Box::into_raw(Box::new(ResinvModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`resinv_model_load`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn resinv_model_free(model: *mut ResinvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of diffusion steps, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn resinv_model_steps(model: *const ResinvModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.schedule().steps())
}

/// 1 for a personalized (identity-conditioned) model, 0 for a base model,
/// -1 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn resinv_model_is_personalized(model: *const ResinvModel) -> i32 {
    match model.as_ref() {
        None => -1,
        Some(m) => (m.params.config.kind == ModelKind::Personalized) as i32,
    }
}

/// Inverts an image under scene `scene_code` and, for personalized models,
/// the identity with index `identity` (negative for none). The returned
/// bundle reconstructs the image exactly and drives [`resinv_bundle_sample`].
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `len` floats and
/// `out` must be valid. Release the result with [`resinv_bundle_free`].
#[no_mangle]
pub unsafe extern "C" fn resinv_invert(
    model: *const ResinvModel,
    pixels: *const f32,
    len: usize,
    scene_code: usize,
    identity_index: i64,
    guidance: f32,
    out: *mut *mut ResinvBundle,
) -> ResinvStatus {
    guard(|| {
        let params = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let image = image_in(pixels, len)?;
        let mut cond = Conditioning::scene(scene_code).with_guidance(guidance);
        if let Some(id) = identity(identity_index)? {
            cond = cond.with_identity(id);
        }
        let bundle = FlowBundle::invert(params, &image, cond)?;
        *out = Box::into_raw(Box::new(ResinvBundle { bundle }));
        Ok(())
    })
}

/// # Safety
/// `bundle` must be null or a handle from [`resinv_invert`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn resinv_bundle_free(bundle: *mut ResinvBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Replays the recorded residuals to rebuild the inverted image.
///
/// # Safety
/// `model` and `bundle` must be live handles and `out` must point to `len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn resinv_reconstruct(
    model: *const ResinvModel,
    bundle: *const ResinvBundle,
    out: *mut f32,
    len: usize,
) -> ResinvStatus {
    guard(|| {
        let params = model_ref(model)?;
        let b = &bundle.as_ref().ok_or_else(|| null("bundle"))?.bundle;
        let image = reconstruct_res(params, &b.residuals, &b.pivot.start(), b.cond_free())?;
        image_out(&image, out, len)
    })
}

/// Triple-flow sampling from an inverted image: the first `mss` steps mix
/// the reconstruction (scaled by `lambda_bkwd`) with the identity guidance
/// (scaled by `lambda_fwd`).
///
/// # Safety
/// `model` and `bundle` must be live handles and `out` must point to `len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn resinv_bundle_sample(
    model: *const ResinvModel,
    bundle: *const ResinvBundle,
    mss: usize,
    lambda_bkwd: f32,
    lambda_fwd: f32,
    out: *mut f32,
    len: usize,
) -> ResinvStatus {
    guard(|| {
        let params = model_ref(model)?;
        let b = &bundle.as_ref().ok_or_else(|| null("bundle"))?.bundle;
        let config = BimdConfig {
            mss,
            lambda_bkwd,
            lambda_fwd,
            ..BimdConfig::for_steps(params.schedule().steps())
        };
        let image = bimd_sample(params, b, &config)?;
        image_out(&image, out, len)
    })
}

/// Runs the full pipeline (base sample, glyph swap, inversion, triple-flow
/// sampling) with default settings and writes the enhanced image.
///
/// # Safety
/// `base` and `personalized` must be live handles and `out` must point to
/// `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn resinv_enhance(
    base: *const ResinvModel,
    personalized: *const ResinvModel,
    scene_code: usize,
    identity_index: i64,
    seed: u64,
    out: *mut f32,
    len: usize,
) -> ResinvStatus {
    guard(|| {
        let base = model_ref(base)?;
        let pers = model_ref(personalized)?;
        let target = identity(identity_index)?.ok_or_else(|| invalid("enhance needs a target identity"))?;
        let request = EnhanceRequest::new(scene_code, target, pers.schedule().steps(), seed);
        let result = enhance(&request, base, pers)?;
        image_out(&result.enhanced, out, len)
    })
}
