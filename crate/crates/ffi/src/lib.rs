//! C interface over the lab: opaque handles, integer status codes, and a
//! thread-local message describing the last failure.
//!
//! Every function is safe to call with null pointers (it reports
//! `LPC_STATUS_NULL_ARGUMENT`), never unwinds across the boundary, and
//! writes its outputs only on `LPC_STATUS_OK`. Handles must be released
//! with their matching `_free` function, on the same library instance that
//! created them.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lpc_core::harness::{load_config, run_experiment};
use lpc_core::metrics::{binarity_scores, collapse_report, read_latents, LatentBatch};
use lpc_core::models::{load_checkpoint, ModelInstance};
use lpc_core::robustness::{deepfool, DeepfoolParams};
use lpc_core::Error;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Config = 4,
    Format = 5,
    Numeric = 6,
    Io = 7,
    Internal = 8,
}

/// Latent vectors with labels, loaded from an LPCZ file.
pub struct LpcLatents(LatentBatch);

/// A trained model, loaded from a checkpoint.
pub struct LpcModel(ModelInstance);

/// Shape of a latent set.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LpcLatentsInfo {
    pub samples: u64,
    pub dim: u64,
    pub classes: u64,
}

/// Shape of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LpcModelInfo {
    pub input_dim: u64,
    pub latent_dim: u64,
    pub classes: u64,
}

/// Collapse geometry of one latent set.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LpcCollapseReport {
    /// Trace of the within-class covariance.
    pub sigma_w_trace: f64,
    /// Within-over-between variability (trace of Sigma_W pinv(Sigma_B) / K).
    pub nc1: f64,
    /// Mean per-sample ratio of nearest-other-centroid distance to
    /// own-centroid distance.
    pub separation_ratio: f64,
    /// Coefficient of variation of the latent norms.
    pub norm_cov: f64,
    /// Nearest-neighbour differential entropy estimate per dimension.
    pub entropy_per_dim: f64,
    pub nc2_equinorm_cov: f64,
    pub nc2_equiangularity_dev: f64,
    pub nc2_cos_std: f64,
}

/// Per-coordinate two-component mixture summary of one latent set.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LpcBinarityScores {
    pub mean_loglik: f64,
    pub mean_sigma: f64,
    pub mean_peak_distance: f64,
}

/// Result of a minimal-perturbation attack on one input.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LpcAttackOutcome {
    /// Perturbation norm over input norm.
    pub rel_norm: f64,
    pub iterations: u64,
    /// 1 when the prediction flipped within the iteration budget.
    pub converged: u8,
    pub source_label: u64,
    pub final_label: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn status_of(e: &Error) -> LpcStatus {
    match e {
        Error::InvalidInput(_) => LpcStatus::InvalidInput,
        Error::Config(_) => LpcStatus::Config,
        Error::Format { .. } => LpcStatus::Format,
        Error::Numeric(_) => LpcStatus::Numeric,
        Error::Io { .. } => LpcStatus::Io,
        Error::Shape { .. } | Error::TapeConsumed => LpcStatus::Internal,
    }
}

fn fail(e: Error) -> LpcStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn fail_null(what: &str) -> LpcStatus {
    set_error(&format!("{what} is null"));
    LpcStatus::NullArgument
}

/// Runs a body that may touch core code, translating panics into a status.
fn guarded(f: impl FnOnce() -> LpcStatus) -> LpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            LpcStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, LpcStatus> {
    if ptr.is_null() {
        return Err(fail_null(what));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(LpcStatus::InvalidUtf8)
        }
    }
}

/// Version of the library as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the message for the most recent failure on this thread into `buf`
/// (truncated to `cap` bytes, always NUL-terminated when `cap > 0`) and
/// returns the message length in bytes, excluding the terminator. Call with
/// a null `buf` or zero `cap` to query the length alone.
#[no_mangle]
pub unsafe extern "C" fn lpc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Runs a whole experiment from a config file; artifacts land in the
/// config's output directory.
#[no_mangle]
pub unsafe extern "C" fn lpc_train(config_path: *const c_char) -> LpcStatus {
    guarded(|| {
        let path = match path_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_config(path).and_then(|cfg| run_experiment(&cfg)) {
            Ok(_) => LpcStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Loads an LPCZ latent file into a handle. On success `*out` owns the set.
#[no_mangle]
pub unsafe extern "C" fn lpc_latents_open(
    path: *const c_char,
    out: *mut *mut LpcLatents,
) -> LpcStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_latents(path) {
            Ok(batch) => {
                *out = Box::into_raw(Box::new(LpcLatents(batch)));
                LpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn lpc_latents_free(h: *mut LpcLatents) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[no_mangle]
pub unsafe extern "C" fn lpc_latents_info(
    h: *const LpcLatents,
    out: *mut LpcLatentsInfo,
) -> LpcStatus {
    guarded(|| {
        let (Some(latents), false) = (h.as_ref(), out.is_null()) else {
            return fail_null(if h.is_null() { "latents" } else { "out" });
        };
        let b = &latents.0;
        *out = LpcLatentsInfo {
            samples: b.len() as u64,
            dim: b.dim() as u64,
            classes: b.classes as u64,
        };
        LpcStatus::Ok
    })
}

/// Computes the collapse battery over a latent set. `knn_k` is the
/// neighbour count for the entropy estimate.
#[no_mangle]
pub unsafe extern "C" fn lpc_collapse_report(
    h: *const LpcLatents,
    knn_k: u64,
    out: *mut LpcCollapseReport,
) -> LpcStatus {
    guarded(|| {
        let (Some(latents), false) = (h.as_ref(), out.is_null()) else {
            return fail_null(if h.is_null() { "latents" } else { "out" });
        };
        match collapse_report(&latents.0, knn_k as usize) {
            Ok(r) => {
                *out = LpcCollapseReport {
                    sigma_w_trace: r.sigma_w_trace,
                    nc1: r.nc1,
                    separation_ratio: r.separation_ratio,
                    norm_cov: r.norm_cov,
                    entropy_per_dim: r.entropy_per_dim,
                    nc2_equinorm_cov: r.nc2.equinorm_cov,
                    nc2_equiangularity_dev: r.nc2.equiangularity_dev,
                    nc2_cos_std: r.nc2.cos_std,
                };
                LpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn lpc_binarity_scores(
    h: *const LpcLatents,
    out: *mut LpcBinarityScores,
) -> LpcStatus {
    guarded(|| {
        let (Some(latents), false) = (h.as_ref(), out.is_null()) else {
            return fail_null(if h.is_null() { "latents" } else { "out" });
        };
        match binarity_scores(&latents.0) {
            Ok(r) => {
                *out = LpcBinarityScores {
                    mean_loglik: r.mean_loglik,
                    mean_sigma: r.mean_sigma,
                    mean_peak_distance: r.mean_peak_distance,
                };
                LpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a model checkpoint into a handle.
#[no_mangle]
pub unsafe extern "C" fn lpc_model_open(path: *const c_char, out: *mut *mut LpcModel) -> LpcStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(LpcModel(model)));
                LpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn lpc_model_free(h: *mut LpcModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[no_mangle]
pub unsafe extern "C" fn lpc_model_info(h: *const LpcModel, out: *mut LpcModelInfo) -> LpcStatus {
    guarded(|| {
        let (Some(model), false) = (h.as_ref(), out.is_null()) else {
            return fail_null(if h.is_null() { "model" } else { "out" });
        };
        let spec = &model.0.spec;
        *out = LpcModelInfo {
            input_dim: spec.input_dim as u64,
            latent_dim: spec.latent_dim() as u64,
            classes: spec.classes as u64,
        };
        LpcStatus::Ok
    })
}

/// Forward pass on one input. `x_len` must equal the model's input width and
/// `out_len` its class count; logits are written to `out`.
#[no_mangle]
pub unsafe extern "C" fn lpc_model_logits(
    h: *const LpcModel,
    x: *const f64,
    x_len: u64,
    out: *mut f64,
    out_len: u64,
) -> LpcStatus {
    guarded(|| {
        let Some(model) = h.as_ref() else { return fail_null("model") };
        if x.is_null() {
            return fail_null("x");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let spec = &model.0.spec;
        if x_len as usize != spec.input_dim || out_len as usize != spec.classes {
            return fail(Error::InvalidInput(format!(
                "logits buffers {x_len}/{out_len} do not match model {}/{}",
                spec.input_dim, spec.classes
            )));
        }
        let input = std::slice::from_raw_parts(x, x_len as usize);
        match model.0.forward_one(input) {
            Ok(trace) => {
                let row = trace.logits.row(0);
                ptr::copy_nonoverlapping(row.as_ptr(), out, row.len());
                LpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Minimal-perturbation attack on one input. `max_iter` zero selects the
/// default budget of 50.
#[no_mangle]
pub unsafe extern "C" fn lpc_deepfool(
    h: *const LpcModel,
    x: *const f64,
    x_len: u64,
    max_iter: u64,
    overshoot: f64,
    out: *mut LpcAttackOutcome,
) -> LpcStatus {
    guarded(|| {
        let Some(model) = h.as_ref() else { return fail_null("model") };
        if x.is_null() {
            return fail_null("x");
        }
        if out.is_null() {
            return fail_null("out");
        }
        if x_len as usize != model.0.spec.input_dim {
            return fail(Error::InvalidInput(format!(
                "input of {x_len} values does not match model width {}",
                model.0.spec.input_dim
            )));
        }
        let input = std::slice::from_raw_parts(x, x_len as usize);
        let params = DeepfoolParams {
            max_iter: if max_iter == 0 { 50 } else { max_iter as usize },
            overshoot,
        };
        match deepfool(&model.0, input, &params) {
            Ok(r) => {
                *out = LpcAttackOutcome {
                    rel_norm: r.rel_norm,
                    iterations: r.iterations as u64,
                    converged: r.converged as u8,
                    source_label: r.source_label as u64,
                    final_label: r.final_label as u64,
                };
                LpcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
