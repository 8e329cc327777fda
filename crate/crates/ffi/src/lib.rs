//! C ABI over slotswap checkpoints.
//!
//! Every function returns a [`SlotswapStatus`]; on failure the message is
//! available from [`slotswap_last_error`] on the same thread. Images cross
//! the boundary as tightly packed `count × size × size × 3` float arrays
//! (row-major, RGB interleaved) with values in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use slotswap::candle_core::{Device, Tensor};
use slotswap::losses::LossWeights;
use slotswap::pixels::{self, Pixels};
use slotswap::slots::{reconstruct, transfer_domain, transfer_instance};
use slotswap::train::{load_checkpoint, resolve_checkpoint, Checkpoint};
use slotswap::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotswapStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Bad input: unknown attribute or value, wrong buffer size, invalid
    /// weights, non-UTF-8 string.
    InvalidArgument = 2,
    /// A registry entry needed for domain translation is empty.
    NotReady = 3,
    /// File could not be read.
    Io = 4,
    /// File is not a valid checkpoint.
    Checkpoint = 5,
    /// Any other failure inside the model.
    Runtime = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Opaque handle to a loaded checkpoint.
pub struct SlotswapModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> SlotswapStatus {
    match err {
        Error::NotReady { .. } => SlotswapStatus::NotReady,
        Error::Io { .. } | Error::Image { .. } => SlotswapStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => SlotswapStatus::Checkpoint,
        e if e.is_validation() => SlotswapStatus::InvalidArgument,
        _ => SlotswapStatus::Runtime,
    }
}

/// Runs `f`, recording any error or panic for [`slotswap_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (SlotswapStatus, String)>) -> SlotswapStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlotswapStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside slotswap".into());
            SlotswapStatus::Panic
        }
    }
}

fn lib(err: Error) -> (SlotswapStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (SlotswapStatus, String) {
    (SlotswapStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SlotswapStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SlotswapStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(p: *const SlotswapModel) -> Result<&'a Checkpoint, (SlotswapStatus, String)> {
    p.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn floats_per_image(ckpt: &Checkpoint) -> usize {
    let s = ckpt.models.config().input_size;
    s * s * 3
}

unsafe fn images_in(
    ckpt: &Checkpoint,
    data: *const f32,
    count: usize,
    what: &str,
) -> Result<Tensor, (SlotswapStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    if count == 0 {
        return Err((SlotswapStatus::InvalidArgument, "`count` must be at least 1".into()));
    }
    let per = floats_per_image(ckpt);
    let slice = std::slice::from_raw_parts(data, per * count);
    let size = ckpt.models.config().input_size;
    let imgs: Vec<Pixels> = slice
        .chunks_exact(per)
        .map(|c| Pixels::new(size, c.to_vec()))
        .collect::<Result<_, _>>()
        .map_err(lib)?;
    let refs: Vec<&Pixels> = imgs.iter().collect();
    pixels::to_tensor(&refs, ckpt.models.dtype(), ckpt.models.device()).map_err(lib)
}

unsafe fn images_out(t: &Tensor, out: *mut f32) -> Result<(), (SlotswapStatus, String)> {
    if out.is_null() {
        return Err(null("output"));
    }
    let imgs = pixels::from_tensor(t).map_err(lib)?;
    let mut offset = 0;
    for img in imgs {
        let d = img.data();
        std::ptr::copy_nonoverlapping(d.as_ptr(), out.add(offset), d.len());
        offset += d.len();
    }
    Ok(())
}

/// Loads a checkpoint file (or a run directory with a `latest` marker).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn slotswap_model_load(path: *const c_char, out: *mut *mut SlotswapModel) -> SlotswapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = c_str(path, "path")?;
        let resolved = resolve_checkpoint(Path::new(path)).map_err(lib)?;
        let inner = load_checkpoint(&resolved, &Device::Cpu).map_err(lib)?;
        *out = Box::into_raw(Box::new(SlotswapModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`slotswap_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slotswap_model_free(model: *mut SlotswapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the model takes.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn slotswap_model_image_size(model: *const SlotswapModel, out: *mut usize) -> SlotswapStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.models.config().input_size;
        Ok(())
    })
}

/// Number of attributes in the model's schema.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn slotswap_model_attribute_count(
    model: *const SlotswapModel,
    out: *mut usize,
) -> SlotswapStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.schema.n();
        Ok(())
    })
}

/// Domain-level translation of `count` images to `attribute = value`.
///
/// # Safety
/// `input` and `output` must each hold `count * size * size * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn slotswap_translate(
    model: *const SlotswapModel,
    attribute: *const c_char,
    value: *const c_char,
    input: *const f32,
    count: usize,
    output: *mut f32,
) -> SlotswapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let idx = m
            .schema
            .value_index(c_str(attribute, "attribute")?, c_str(value, "value")?)
            .map_err(lib)?;
        let x = images_in(m, input, count, "input")?;
        let y = transfer_domain(&m.models, &m.registry, &x, idx).map_err(lib)?;
        images_out(&y, output)
    })
}

/// Instance-level transfer of `attribute` from `reference[i]` onto `input[i]`.
///
/// # Safety
/// `input`, `reference` and `output` must each hold `count * size * size * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn slotswap_transfer(
    model: *const SlotswapModel,
    attribute: *const c_char,
    input: *const f32,
    reference: *const f32,
    count: usize,
    output: *mut f32,
) -> SlotswapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let attr = m.schema.attr_index(c_str(attribute, "attribute")?).map_err(lib)?;
        let x = images_in(m, input, count, "input")?;
        let r = images_in(m, reference, count, "reference")?;
        let y = transfer_instance(&m.models, &x, &r, attr).map_err(lib)?;
        images_out(&y.x_trans, output)
    })
}

/// Encode and regenerate without edits.
///
/// # Safety
/// `input` and `output` must each hold `count * size * size * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn slotswap_reconstruct(
    model: *const SlotswapModel,
    input: *const f32,
    count: usize,
    output: *mut f32,
) -> SlotswapStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = images_in(m, input, count, "input")?;
        let y = reconstruct(&m.models, &x).map_err(lib)?;
        images_out(&y, output)
    })
}

/// Weighted generator objective from its three scalar terms.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn slotswap_generation_loss(
    transfer: f64,
    back: f64,
    attr: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    out: *mut f64,
) -> SlotswapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = LossWeights::new(lambda1, lambda2, lambda3).map_err(lib)?;
        *out = slotswap::losses::generation_loss(transfer, back, attr, &w).map_err(lib)?;
        Ok(())
    })
}

/// Message of the last failure on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn slotswap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slotswap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
