//! C ABI over the hfunet library. Models are opaque handles; every fallible
//! call returns an [`HfStatus`] and leaves a message retrievable with
//! [`hf_last_error`] on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hfunet::contour::{extract_contour, gaussian_contour_map};
use hfunet::metrics::evaluate_case;
use hfunet::model::{build_topology, load_checkpoint, save_checkpoint, ModelState, TopologyConfig};
use hfunet::pipeline::{infer, InferConfig};
use hfunet::tensor::Tensor;
use hfunet::volume::{Geometry, LabelVolume, Volume};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Model = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct HfModel {
    inner: ModelState,
}

/// Metrics of one case; undefined values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HfMetrics {
    pub dsc: f64,
    pub asd_mm: f64,
    pub sen: f64,
    pub ppv: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: HfStatus, msg: impl Into<String>) -> HfStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> HfStatus) -> HfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == HfStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(HfStatus::Panic, "internal panic"),
    }
}

fn model_status(e: &hfunet::model::ModelError) -> HfStatus {
    use hfunet::model::ModelError as E;
    match e {
        E::Config(_) | E::Input(_) | E::Tensor(_) => HfStatus::InvalidArgument,
        E::Checkpoint(_) => HfStatus::Checkpoint,
        E::Io(_) => HfStatus::Io,
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, HfStatus> {
    if p.is_null() {
        return Err(fail(HfStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(HfStatus::InvalidArgument, "string is not UTF-8"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a freshly initialized model from a topology name (`unet`, `eb`,
/// `lb`, `hf-<k>`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn hf_model_build(name: *const c_char, seed: u64, out: *mut *mut HfModel) -> HfStatus {
    guard(|| {
        if out.is_null() {
            return fail(HfStatus::NullPointer, "null output handle");
        }
        let name = match path_arg(name) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let made = TopologyConfig::named(name).and_then(|cfg| build_topology(&cfg, seed));
        match made {
            Ok(m) => {
                *out = Box::into_raw(Box::new(HfModel { inner: m }));
                HfStatus::Ok
            }
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn hf_model_load(path: *const c_char, out: *mut *mut HfModel) -> HfStatus {
    guard(|| {
        if out.is_null() {
            return fail(HfStatus::NullPointer, "null output handle");
        }
        let path = match path_arg(path) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match load_checkpoint(path, None) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(HfModel { inner: m }));
                HfStatus::Ok
            }
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

/// Writes a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hf_model_save(model: *const HfModel, path: *const c_char) -> HfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(HfStatus::NullPointer, "null model") };
        let path = match path_arg(path) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match save_checkpoint(path, &m.inner) {
            Ok(()) => HfStatus::Ok,
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hf_model_free(model: *mut HfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input slices per prediction (the 2.5D stack depth), 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_model_in_slices(model: *const HfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().in_slices)
}

/// Hex SHA-256 over every parameter, written NUL-terminated into `buf`
/// (needs 65 bytes).
///
/// # Safety
/// `model` must be a live handle; `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hf_model_checksum(model: *const HfModel, buf: *mut c_char, len: usize) -> HfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(HfStatus::NullPointer, "null model") };
        if buf.is_null() {
            return fail(HfStatus::NullPointer, "null buffer");
        }
        let sum = m.inner.store.checksum_all();
        if len < sum.len() + 1 {
            return fail(HfStatus::BufferTooSmall, format!("need {} bytes", sum.len() + 1));
        }
        ptr::copy_nonoverlapping(sum.as_ptr() as *const c_char, buf, sum.len());
        *buf.add(sum.len()) = 0;
        HfStatus::Ok
    })
}

/// Foreground probabilities `[batch, h, w]` for a `[batch, slices, h, w]`
/// stack batch.
///
/// # Safety
/// `input` must hold `batch*slices*h*w` floats; `probs` `batch*h*w`.
#[no_mangle]
pub unsafe extern "C" fn hf_model_predict(
    model: *const HfModel,
    input: *const f32,
    batch: usize,
    slices: usize,
    h: usize,
    w: usize,
    probs: *mut f32,
) -> HfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(HfStatus::NullPointer, "null model") };
        if input.is_null() || probs.is_null() {
            return fail(HfStatus::NullPointer, "null buffer");
        }
        let n = batch * slices * h * w;
        let x = match Tensor::from_vec(&[batch, slices, h, w], std::slice::from_raw_parts(input, n).to_vec()) {
            Ok(x) => x,
            Err(e) => return fail(HfStatus::InvalidArgument, e.to_string()),
        };
        match m.inner.predict(&x) {
            Ok(p) => {
                ptr::copy_nonoverlapping(p.probs.data().as_ptr(), probs, batch * h * w);
                HfStatus::Ok
            }
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

/// Segments a region volume (x fastest, square slices), writing a 0/1 mask
/// of the same size; keeps the largest component when `largest` is nonzero.
///
/// # Safety
/// `data` and `mask` must hold `nx*ny*nz` elements.
#[no_mangle]
pub unsafe extern "C" fn hf_segment_region(
    model: *const HfModel,
    data: *const f32,
    nx: usize,
    ny: usize,
    nz: usize,
    largest: i32,
    mask: *mut u8,
) -> HfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(HfStatus::NullPointer, "null model") };
        if data.is_null() || mask.is_null() {
            return fail(HfStatus::NullPointer, "null buffer");
        }
        let g = match Geometry::new([nx, ny, nz], [1.0; 3]) {
            Ok(g) => g,
            Err(e) => return fail(HfStatus::InvalidArgument, e.to_string()),
        };
        let v = match Volume::new(g, std::slice::from_raw_parts(data, g.len()).to_vec()) {
            Ok(v) => v,
            Err(e) => return fail(HfStatus::InvalidArgument, e.to_string()),
        };
        match infer(&m.inner, &v, &InferConfig { largest_component: largest != 0, ..Default::default() }) {
            Ok(out) => {
                ptr::copy_nonoverlapping(out.mask.data().as_ptr(), mask, g.len());
                HfStatus::Ok
            }
            Err(e) => fail(model_status(&e), e.to_string()),
        }
    })
}

/// Truncated Gaussian contour heatmap of a binary `nx x ny` mask (x
/// fastest).
///
/// # Safety
/// `mask` and `out` must hold `nx*ny` elements.
#[no_mangle]
pub unsafe extern "C" fn hf_contour_heatmap(
    mask: *const u8,
    nx: usize,
    ny: usize,
    sigma: f64,
    truncation: f64,
    out: *mut f64,
) -> HfStatus {
    guard(|| {
        if mask.is_null() || out.is_null() {
            return fail(HfStatus::NullPointer, "null buffer");
        }
        let m = std::slice::from_raw_parts(mask, nx * ny);
        let hm = extract_contour(m, [nx, ny], 0).and_then(|c| gaussian_contour_map(&c, [nx, ny], sigma, truncation));
        match hm {
            Ok(h) => {
                ptr::copy_nonoverlapping(h.data.as_ptr(), out, nx * ny);
                HfStatus::Ok
            }
            Err(e) => fail(HfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// DSC, ASD (mm), sensitivity and precision of two binary volumes.
///
/// # Safety
/// `gt` and `seg` must hold `nx*ny*nz` bytes; `spacing` 3 floats; `out`
/// valid for a write.
#[no_mangle]
pub unsafe extern "C" fn hf_metrics(
    gt: *const u8,
    seg: *const u8,
    nx: usize,
    ny: usize,
    nz: usize,
    spacing: *const f32,
    out: *mut HfMetrics,
) -> HfStatus {
    guard(|| {
        if gt.is_null() || seg.is_null() || spacing.is_null() || out.is_null() {
            return fail(HfStatus::NullPointer, "null buffer");
        }
        let sp = [*spacing, *spacing.add(1), *spacing.add(2)];
        let g = match Geometry::new([nx, ny, nz], sp) {
            Ok(g) => g,
            Err(e) => return fail(HfStatus::InvalidArgument, e.to_string()),
        };
        let lab = |p: *const u8| LabelVolume::new(g, std::slice::from_raw_parts(p, g.len()).to_vec());
        let (a, b) = match (lab(gt), lab(seg)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(HfStatus::InvalidArgument, e.to_string()),
        };
        let c = evaluate_case("ffi", &a, &b, g.spacing_f64());
        *out = HfMetrics {
            dsc: c.dsc,
            asd_mm: c.asd_mm.unwrap_or(f64::NAN),
            sen: c.sen.unwrap_or(f64::NAN),
            ppv: c.ppv.unwrap_or(f64::NAN),
        };
        match c.error {
            Some(e) if !c.dsc.is_finite() => fail(HfStatus::InvalidArgument, e),
            _ => HfStatus::Ok,
        }
    })
}
