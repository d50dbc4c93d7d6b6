//! C ABI over the relit renderer.
//!
//! Models are opaque handles. Every fallible call returns a [`RelitStatus`];
//! on failure the message is kept per thread for [`relit_last_error`].
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use relit::render::{render, RenderOptions};
use relit::scene::SceneModel;
use relit::service::{render_png, validate_request, ServiceConfig, ValidRequest};
use relit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelitStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
    BufferTooSmall = 7,
}

/// A loaded scene model.
pub struct RelitModel {
    model: SceneModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RelitModelInfo {
    pub points: u64,
    pub descriptor_width: u32,
    pub trained_steps: u64,
}

/// Bytes owned by the library; release with [`relit_buffer_free`].
#[repr(C)]
#[derive(Debug)]
pub struct RelitBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> RelitStatus {
    match e {
        Error::Invalid(_) | Error::EmptyCloud => RelitStatus::InvalidArgument,
        Error::Io { .. } => RelitStatus::Io,
        Error::Format(_) => RelitStatus::Format,
        _ => RelitStatus::Runtime,
    }
}

/// Runs `f`, recording its error or panic.
fn guarded(f: impl FnOnce() -> Result<(), (RelitStatus, String)>) -> RelitStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RelitStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RelitStatus::Panic
        }
    }
}

fn fail(e: Error) -> (RelitStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (RelitStatus, String) {
    (RelitStatus::NullArgument, format!("{name} is null"))
}

unsafe fn utf8<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, (RelitStatus, String)> {
    if ptr.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (RelitStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn request(json: *const c_char) -> Result<ValidRequest, (RelitStatus, String)> {
    let text = utf8(json, "request_json")?;
    validate_request(text.as_bytes(), &ServiceConfig::default()).map_err(|r| (RelitStatus::InvalidArgument, r.message))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn relit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn relit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a model container.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn relit_model_load(path: *const c_char, out: *mut *mut RelitModel) -> RelitStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = utf8(path, "path")?;
        let model = relit::io::load_model(Path::new(path)).map_err(fail)?;
        model.validate().map_err(fail)?;
        *out = Box::into_raw(Box::new(RelitModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`relit_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn relit_model_free(model: *mut RelitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relit_model_info(model: *const RelitModel, out: *mut RelitModelInfo) -> RelitStatus {
    guarded(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = RelitModelInfo {
            points: m.cloud.len() as u64,
            descriptor_width: m.descriptors.width() as u32,
            trained_steps: m.trained_steps,
        };
        Ok(())
    })
}

/// Renders a request (the HTTP `/render` body) to sRGB PNG bytes,
/// identical to the service response.
///
/// # Safety
/// `model` must be a live handle, `request_json` NUL-terminated, `out`
/// writable. On success release `out` with [`relit_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn relit_render_png(
    model: *const RelitModel,
    request_json: *const c_char,
    out: *mut RelitBuffer,
) -> RelitStatus {
    guarded(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = RelitBuffer {
            data: std::ptr::null_mut(),
            len: 0,
        };
        let req = request(request_json)?;
        let png = render_png(m, &req, true).map_err(fail)?;
        let boxed = png.into_boxed_slice();
        let len = boxed.len();
        *out = RelitBuffer {
            data: Box::into_raw(boxed).cast(),
            len,
        };
        Ok(())
    })
}

/// Renders a request to linear RGB floats, row-major and interleaved
/// (`h*w*3` values). `width` and `height` are always written when
/// non-null, so a call with `len = 0` sizes the buffer.
///
/// # Safety
/// `out` must hold `len` floats; `width`/`height` may be null.
#[no_mangle]
pub unsafe extern "C" fn relit_render_linear(
    model: *const RelitModel,
    request_json: *const c_char,
    out: *mut f32,
    len: usize,
    width: *mut u32,
    height: *mut u32,
) -> RelitStatus {
    guarded(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let req = request(request_json)?;
        let (w, h) = (req.camera.width, req.camera.height);
        if let Some(p) = width.as_mut() {
            *p = w as u32;
        }
        if let Some(p) = height.as_mut() {
            *p = h as u32;
        }
        let need = w * h * 3;
        if len < need {
            return Err((RelitStatus::BufferTooSmall, format!("need {need} floats, got {len}")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let img = render(m, &req.camera, &req.lighting, &RenderOptions::default()).map_err(fail)?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        let hw = w * h;
        for i in 0..hw {
            for c in 0..3 {
                dst[3 * i + c] = img.data[c * hw + i];
            }
        }
        Ok(())
    })
}

/// Releases a buffer from [`relit_render_png`]; empty buffers are ignored.
///
/// # Safety
/// `buffer` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn relit_buffer_free(buffer: RelitBuffer) {
    if !buffer.data.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(buffer.data, buffer.len)));
    }
}
