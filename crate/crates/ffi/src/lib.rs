//! C ABI over the `fddwnet` network.
//!
//! Every fallible function returns an [`FddwStatus`]; on failure a message
//! is available from [`fddw_last_error_message`] on the same thread. Handles
//! are opaque and must be released with [`fddw_net_free`]. A handle may be
//! shared between threads for the read-only calls (forward, predict, save,
//! counts) but loading weights requires exclusive access.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fddwnet::archive::{load_weights, load_weights_file, save_weights, save_weights_file};
use fddwnet::conv::receptive_field;
use fddwnet::graph::argmax_labels;
use fddwnet::{Error, NetworkGraph, Rng, Shape, Tensor};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FddwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    BadMagic = 4,
    VersionUnsupported = 5,
    ChecksumMismatch = 6,
    ShapeMismatchOnLoad = 7,
    UnsupportedFormat = 8,
    IoFailure = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Opaque network handle.
pub struct FddwNet {
    net: NetworkGraph<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FddwStatus {
    match e {
        Error::ShapeMismatch(_)
        | Error::OddSpatialDim { .. }
        | Error::BadInputShape(_)
        | Error::TapeMismatch { .. } => FddwStatus::ShapeMismatch,
        Error::UnsupportedSpec(_)
        | Error::InvalidClassCount(_)
        | Error::LabelOutOfRange { .. }
        | Error::EmptyMatrix => FddwStatus::InvalidArgument,
        Error::BadMagic => FddwStatus::BadMagic,
        Error::VersionUnsupported(_) => FddwStatus::VersionUnsupported,
        Error::ChecksumMismatch { .. } => FddwStatus::ChecksumMismatch,
        Error::ShapeMismatchOnLoad { .. } | Error::MalformedArchive(_) => FddwStatus::ShapeMismatchOnLoad,
        Error::UnsupportedFormat(_) => FddwStatus::UnsupportedFormat,
        Error::IoFailure { .. } => FddwStatus::IoFailure,
    }
}

struct Fail(FddwStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: FddwStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FddwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            FddwStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            FddwStatus::Panic
        }
    }
}

unsafe fn handle<'a>(net: *const FddwNet) -> Result<&'a FddwNet, Fail> {
    unsafe { net.as_ref() }.ok_or(Fail(FddwStatus::NullPointer, "null network handle".into()))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Fail> {
    if path.is_null() {
        return fail(FddwStatus::NullPointer, "null path");
    }
    let s = unsafe { CStr::from_ptr(path) }
        .to_str()
        .map_err(|_| Fail(FddwStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return fail(FddwStatus::NullPointer, "null output pointer");
    }
    unsafe { out.write(value) };
    Ok(())
}

/// Builds a network for `classes` classes with weights initialized from
/// `seed`, storing the handle in `*out`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_new(classes: u32, seed: u64, out: *mut *mut FddwNet) -> FddwStatus {
    guard(|| {
        if out.is_null() {
            return fail(FddwStatus::NullPointer, "null output pointer");
        }
        let net = NetworkGraph::<f32>::build(classes as usize, &mut Rng::new(seed))?;
        unsafe { out.write(Box::into_raw(Box::new(FddwNet { net }))) };
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `net` must be null or a handle from [`fddw_net_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_free(net: *mut FddwNet) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// Number of output classes.
///
/// # Safety
/// `net` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_classes(net: *const FddwNet, out: *mut u32) -> FddwStatus {
    guard(|| {
        let h = unsafe { handle(net) }?;
        unsafe { write_out(out, h.net.classes as u32) }
    })
}

/// Trainable parameter count and total count including running statistics.
///
/// # Safety
/// `net` must be a live handle; the output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_param_count(net: *const FddwNet, trainable: *mut u64, total: *mut u64) -> FddwStatus {
    guard(|| {
        let h = unsafe { handle(net) }?;
        unsafe { write_out(trainable, h.net.params.trainable_count() as u64) }?;
        unsafe { write_out(total, h.net.params.total_count() as u64) }
    })
}

/// `(n - 1) * r + 1` for odd `n >= 1` and `r >= 1`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fddw_receptive_field(n: u32, r: u32, out: *mut u32) -> FddwStatus {
    guard(|| {
        if n == 0 || n.is_multiple_of(2) || r == 0 {
            return fail(
                FddwStatus::InvalidArgument,
                format!("need odd n >= 1 and r >= 1, got n={n} r={r}"),
            );
        }
        unsafe { write_out(out, receptive_field(n as usize, r as usize) as u32) }
    })
}

/// Loads an archive file; on failure the weights are unchanged.
///
/// # Safety
/// `net` must be a live handle not used concurrently; `path` a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_load_weights(net: *mut FddwNet, path: *const c_char) -> FddwStatus {
    guard(|| {
        let h = unsafe { net.as_mut() }.ok_or(Fail(FddwStatus::NullPointer, "null network handle".into()))?;
        let path = unsafe { path_arg(path) }?;
        Ok(load_weights_file(path, &mut h.net)?)
    })
}

/// Writes the weights to `path` atomically.
///
/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_save_weights(net: *const FddwNet, path: *const c_char) -> FddwStatus {
    guard(|| {
        let h = unsafe { handle(net) }?;
        let path = unsafe { path_arg(path) }?;
        Ok(save_weights_file(&h.net, path)?)
    })
}

/// Loads an archive held in memory.
///
/// # Safety
/// `net` must be a live handle not used concurrently; `data` must point to
/// `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_load_weights_bytes(net: *mut FddwNet, data: *const u8, len: usize) -> FddwStatus {
    guard(|| {
        let h = unsafe { net.as_mut() }.ok_or(Fail(FddwStatus::NullPointer, "null network handle".into()))?;
        if data.is_null() {
            return fail(FddwStatus::NullPointer, "null archive buffer");
        }
        let bytes = unsafe { std::slice::from_raw_parts(data, len) };
        Ok(load_weights(bytes, &mut h.net)?)
    })
}

/// Serializes the weights into `buf`. `*written` receives the archive size
/// even when the call fails with `BufferTooSmall`; pass a null `buf` and
/// zero `capacity` to query it.
///
/// # Safety
/// `net` must be a live handle; `buf` must be null or point to `capacity`
/// writable bytes; `written` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_save_weights_bytes(
    net: *const FddwNet,
    buf: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> FddwStatus {
    guard(|| {
        let h = unsafe { handle(net) }?;
        let bytes = save_weights(&h.net)?;
        unsafe { write_out(written, bytes.len()) }?;
        if bytes.len() > capacity || buf.is_null() {
            return fail(
                FddwStatus::BufferTooSmall,
                format!("archive needs {} bytes, buffer has {capacity}", bytes.len()),
            );
        }
        unsafe { ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len()) };
        Ok(())
    })
}

unsafe fn run_forward(
    net: *const FddwNet,
    input: *const f32,
    batch: u32,
    height: u32,
    width: u32,
) -> Result<Tensor<f32>, Fail> {
    let h = unsafe { handle(net) }?;
    if input.is_null() {
        return fail(FddwStatus::NullPointer, "null input buffer");
    }
    let shape = Shape::new(batch as usize, 3, height as usize, width as usize);
    let data = unsafe { std::slice::from_raw_parts(input, shape.len()) }.to_vec();
    let x = Tensor::from_vec(shape, data)?;
    Ok(h.net.forward(&x)?)
}

/// Inference on a normalized `batch x 3 x height x width` input (NCHW,
/// row-major). Writes `batch x classes x height x width` logits.
///
/// # Safety
/// `net` must be a live handle; `input` must hold `batch*3*height*width`
/// floats and `output` `output_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_forward(
    net: *const FddwNet,
    input: *const f32,
    batch: u32,
    height: u32,
    width: u32,
    output: *mut f32,
    output_len: usize,
) -> FddwStatus {
    guard(|| {
        if output.is_null() {
            return fail(FddwStatus::NullPointer, "null output buffer");
        }
        let y = unsafe { run_forward(net, input, batch, height, width) }?;
        if output_len < y.data().len() {
            return fail(
                FddwStatus::BufferTooSmall,
                format!("logits need {} floats, buffer has {output_len}", y.data().len()),
            );
        }
        unsafe { ptr::copy_nonoverlapping(y.data().as_ptr(), output, y.data().len()) };
        Ok(())
    })
}

/// Inference followed by a per-pixel argmax; writes `batch x height x width`
/// class indices.
///
/// # Safety
/// As [`fddw_net_forward`], with `labels` holding `labels_len` writable
/// integers.
#[no_mangle]
pub unsafe extern "C" fn fddw_net_predict(
    net: *const FddwNet,
    input: *const f32,
    batch: u32,
    height: u32,
    width: u32,
    labels: *mut u32,
    labels_len: usize,
) -> FddwStatus {
    guard(|| {
        if labels.is_null() {
            return fail(FddwStatus::NullPointer, "null label buffer");
        }
        let y = unsafe { run_forward(net, input, batch, height, width) }?;
        let l = argmax_labels(&y);
        if labels_len < l.len() {
            return fail(
                FddwStatus::BufferTooSmall,
                format!("labels need {} entries, buffer has {labels_len}", l.len()),
            );
        }
        unsafe { ptr::copy_nonoverlapping(l.as_ptr(), labels, l.len()) };
        Ok(())
    })
}

/// Message for the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fddw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code; unknown codes map to "unknown status".
#[no_mangle]
pub extern "C" fn fddw_status_name(code: i32) -> *const c_char {
    let s: &'static CStr = match code {
        0 => c"ok",
        1 => c"null pointer",
        2 => c"invalid argument",
        3 => c"shape mismatch",
        4 => c"bad magic",
        5 => c"version unsupported",
        6 => c"checksum mismatch",
        7 => c"shape mismatch on load",
        8 => c"unsupported format",
        9 => c"i/o failure",
        10 => c"buffer too small",
        11 => c"panic",
        _ => c"unknown status",
    };
    s.as_ptr()
}
