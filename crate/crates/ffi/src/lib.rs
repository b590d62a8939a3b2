//! C ABI over the depth-restoration library: opaque handles, integer status
//! codes, and a thread-local last-error message. The header is generated by
//! cbindgen at build time into `include/rdepth.h`.
//!
//! Ownership rules: every `*_new`/`*_load` hands the caller an owned handle
//! that must go back through the matching `*_free`. Tensors returned through
//! out-parameters are owned by the caller too. Data pointers borrowed from a
//! handle stay valid until that handle is freed or mutated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use rdepth::avlfe::AvlfeMode;
use rdepth::diffusion::RestoreOptions;
use rdepth::error::Error;
use rdepth::io;
use rdepth::metrics;
use rdepth::model::{DepthPipeline, ModelDescriptor};
use rdepth::params::ParameterStore;
use rdepth::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use rdepth::tensor::Tensor;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    IoError = 4,
    FormatError = 5,
    InternalError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap_or_default());
}

fn status_of(err: &Error) -> RdStatus {
    match err {
        Error::ShapeMismatch(_) => RdStatus::ShapeMismatch,
        Error::InvalidArg(_) | Error::Config(_) | Error::EmptyMask(_) => RdStatus::InvalidArgument,
        Error::MagicMismatch(_)
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::DimOverflow(_) => RdStatus::FormatError,
        Error::Io(_) => RdStatus::IoError,
        _ => RdStatus::InternalError,
    }
}

fn fail(err: Error) -> RdStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

/// Message for the most recent error on this thread; valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn rd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque dense f32 tensor.
pub struct RdTensor(Tensor);

/// Opaque noise schedule.
pub struct RdSchedule(NoiseSchedule);

/// Opaque trained pipeline (model descriptor plus parameters).
pub struct RdPipeline {
    pipeline: DepthPipeline,
    store: ParameterStore,
}

unsafe fn cstr_path<'a>(p: *const c_char) -> Result<&'a Path, RdStatus> {
    if p.is_null() {
        set_error("null path");
        return Err(RdStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(p) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(RdStatus::InvalidArgument)
        }
    }
}

macro_rules! nonnull {
    ($p:expr) => {
        if $p.is_null() {
            set_error(concat!("null pointer: ", stringify!($p)));
            return RdStatus::NullPointer;
        }
    };
}

/// Builds a tensor from row-major data. `dims` has `ndim` entries.
///
/// # Safety
/// `dims` must point to `ndim` usizes and `data` to the implied number of
/// floats; `out` must be a valid location for a pointer.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_create(
    dims: *const usize,
    ndim: usize,
    data: *const f32,
    out: *mut *mut RdTensor,
) -> RdStatus {
    nonnull!(dims);
    nonnull!(data);
    nonnull!(out);
    let dims = unsafe { std::slice::from_raw_parts(dims, ndim) }.to_vec();
    let numel: usize = dims.iter().product();
    let data = unsafe { std::slice::from_raw_parts(data, numel) }.to_vec();
    match Tensor::new(dims, data) {
        Ok(t) => {
            unsafe { *out = Box::into_raw(Box::new(RdTensor(t))) };
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_load(path: *const c_char, out: *mut *mut RdTensor) -> RdStatus {
    nonnull!(out);
    let path = match unsafe { cstr_path(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match io::load_tensor(path) {
        Ok(t) => {
            unsafe { *out = Box::into_raw(Box::new(RdTensor(t))) };
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `t` must be a live tensor handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_save(t: *const RdTensor, path: *const c_char) -> RdStatus {
    nonnull!(t);
    let path = match unsafe { cstr_path(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match io::save_tensor(unsafe { &(*t).0 }, path) {
        Ok(()) => RdStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `t` must be a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_ndim(t: *const RdTensor) -> usize {
    if t.is_null() {
        return 0;
    }
    unsafe { (*t).0.dims().len() }
}

/// Dimension `i`, or 0 when out of range.
///
/// # Safety
/// `t` must be a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_dim(t: *const RdTensor, i: usize) -> usize {
    if t.is_null() {
        return 0;
    }
    unsafe { (*t).0.dims().get(i).copied().unwrap_or(0) }
}

/// # Safety
/// `t` must be a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_numel(t: *const RdTensor) -> usize {
    if t.is_null() {
        return 0;
    }
    unsafe { (*t).0.numel() }
}

/// Borrowed pointer to the row-major payload; valid while the handle lives.
///
/// # Safety
/// `t` must be a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_data(t: *const RdTensor) -> *const f32 {
    if t.is_null() {
        return ptr::null();
    }
    unsafe { (*t).0.data().as_ptr() }
}

/// # Safety
/// `t` must be an owned handle from this library, freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn rd_tensor_free(t: *mut RdTensor) {
    if !t.is_null() {
        drop(unsafe { Box::from_raw(t) });
    }
}

/// Linear schedule with `steps` forward steps.
///
/// # Safety
/// `out` must be a valid location for a pointer.
#[no_mangle]
pub unsafe extern "C" fn rd_schedule_create(steps: usize, out: *mut *mut RdSchedule) -> RdStatus {
    nonnull!(out);
    match build_schedule(steps, ScheduleKind::Linear) {
        Ok(s) => {
            unsafe { *out = Box::into_raw(Box::new(RdSchedule(s))) };
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Cumulative noise coefficient at step `t` (0..=steps).
///
/// # Safety
/// `s` must be a live schedule handle, `out` a valid f64 location.
#[no_mangle]
pub unsafe extern "C" fn rd_schedule_alpha_bar(
    s: *const RdSchedule,
    t: usize,
    out: *mut f64,
) -> RdStatus {
    nonnull!(s);
    nonnull!(out);
    let sched = unsafe { &(*s).0 };
    if t > sched.steps() {
        set_error("step out of range");
        return RdStatus::InvalidArgument;
    }
    unsafe { *out = sched.alpha_bar(t) };
    RdStatus::Ok
}

/// # Safety
/// `s` must be an owned handle from this library, freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn rd_schedule_free(s: *mut RdSchedule) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Loads a pipeline from a model descriptor JSON and a checkpoint file.
///
/// # Safety
/// Paths must be NUL-terminated strings, `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rd_pipeline_load(
    descriptor_json: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut RdPipeline,
) -> RdStatus {
    nonnull!(out);
    let desc_path = match unsafe { cstr_path(descriptor_json) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let ckpt_path = match unsafe { cstr_path(checkpoint) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let inner = || -> rdepth::Result<RdPipeline> {
        let text = std::fs::read_to_string(desc_path)?;
        let desc: ModelDescriptor = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("descriptor parse: {e}")))?;
        let store = io::load_checkpoint(ckpt_path)?;
        let pipeline = DepthPipeline::from_store(&desc, &store)?;
        Ok(RdPipeline { pipeline, store })
    };
    match inner() {
        Ok(p) => {
            unsafe { *out = Box::into_raw(Box::new(p)) };
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Depth from the no-diffusion path. The output tensor is (1, H, W) meters.
///
/// # Safety
/// `p` and `image` must be live handles, `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rd_pipeline_baseline_depth(
    p: *const RdPipeline,
    image: *const RdTensor,
    out: *mut *mut RdTensor,
) -> RdStatus {
    nonnull!(p);
    nonnull!(image);
    nonnull!(out);
    let rp = unsafe { &*p };
    match rp.pipeline.baseline_forward(&rp.store, unsafe { &(*image).0 }) {
        Ok(d) => {
            unsafe { *out = Box::into_raw(Box::new(RdTensor(d.into_values()))) };
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Depth through the restoration process: `t_total` forward steps,
/// `strides` reverse strides, deterministic for a fixed `seed`.
///
/// # Safety
/// `p` and `image` must be live handles, `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rd_pipeline_infer_depth(
    p: *const RdPipeline,
    image: *const RdTensor,
    t_total: usize,
    strides: usize,
    seed: u64,
    literal_removal: bool,
    out: *mut *mut RdTensor,
) -> RdStatus {
    nonnull!(p);
    nonnull!(image);
    nonnull!(out);
    let rp = unsafe { &*p };
    let inner = || -> rdepth::Result<Tensor> {
        let sched = build_schedule(t_total, ScheduleKind::Linear)?;
        let opts = RestoreOptions { literal_removal, fixed_conditions: false };
        let (depth, _) = rp.pipeline.infer(
            &rp.store,
            unsafe { &(*image).0 },
            &sched,
            strides,
            seed,
            &opts,
            AvlfeMode::Off,
            None,
        )?;
        Ok(depth.into_values())
    };
    match inner() {
        Ok(d) => {
            unsafe { *out = Box::into_raw(Box::new(RdTensor(d))) };
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `p` must be an owned handle from this library, freed exactly once.
#[no_mangle]
pub unsafe extern "C" fn rd_pipeline_free(p: *mut RdPipeline) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Standard depth metric set over masked pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RdMetrics {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
}

/// # Safety
/// All tensor handles must be live and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rd_depth_metrics(
    pred: *const RdTensor,
    gt: *const RdTensor,
    mask: *const RdTensor,
    out: *mut RdMetrics,
) -> RdStatus {
    nonnull!(pred);
    nonnull!(gt);
    nonnull!(mask);
    nonnull!(out);
    match metrics::depth_metrics(unsafe { &(*pred).0 }, unsafe { &(*gt).0 }, unsafe { &(*mask).0 }) {
        Ok(r) => {
            unsafe {
                *out = RdMetrics {
                    rmse: r.rmse,
                    abs_rel: r.abs_rel,
                    sq_rel: r.sq_rel,
                    rmse_log: r.rmse_log,
                    delta1: r.delta1,
                    delta2: r.delta2,
                    delta3: r.delta3,
                    pixels: r.pixels,
                };
            }
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Scale-invariant log loss over masked pixels.
///
/// # Safety
/// All tensor handles must be live and `out` a valid f64 location.
#[no_mangle]
pub unsafe extern "C" fn rd_silog_loss(
    pred: *const RdTensor,
    gt: *const RdTensor,
    mask: *const RdTensor,
    out: *mut f64,
) -> RdStatus {
    nonnull!(pred);
    nonnull!(gt);
    nonnull!(mask);
    nonnull!(out);
    match metrics::silog_loss(unsafe { &(*pred).0 }, unsafe { &(*gt).0 }, unsafe { &(*mask).0 }) {
        Ok(v) => {
            unsafe { *out = v };
            RdStatus::Ok
        }
        Err(e) => fail(e),
    }
}
