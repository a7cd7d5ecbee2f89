//! C ABI over the mogp classifier. Models are opaque handles created by
//! [`mogp_model_load`] and released by [`mogp_model_free`]; every fallible
//! call returns a [`MogpStatus`] and leaves a message retrievable through
//! [`mogp_last_error`] on failure.
//!
//! The committed header `include/mogp.h` mirrors these declarations; a test
//! keeps the two in sync.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use libc::{c_char, size_t};

use mogp::classify::predict;
use mogp::data::load_model;
use mogp::error::MogpError;
use mogp::model::{Instance, ModelBundle};
use nalgebra_shim::build_matrices;

/// Status codes mirror the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MogpStatus {
    MogpOk = 0,
    MogpInvalidArgument = 1,
    MogpDataError = 2,
    MogpNumericalError = 3,
}

/// Opaque trained model.
pub struct MogpModel {
    bundle: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &MogpError) -> MogpStatus {
    match err {
        MogpError::Config(_) => MogpStatus::MogpInvalidArgument,
        MogpError::Numerical(_) => MogpStatus::MogpNumericalError,
        _ => MogpStatus::MogpDataError,
    }
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mogp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a model file written by `mogp train` / `save_model`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid
/// pointer; on success `*out_model` owns the model and must be released
/// with [`mogp_model_free`].
#[no_mangle]
pub unsafe extern "C" fn mogp_model_load(path: *const c_char, out_model: *mut *mut MogpModel) -> MogpStatus {
    if path.is_null() || out_model.is_null() {
        set_last_error("null pointer argument");
        return MogpStatus::MogpInvalidArgument;
    }
    *out_model = ptr::null_mut();
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_last_error("path is not valid UTF-8");
            return MogpStatus::MogpInvalidArgument;
        }
    };
    match load_model(Path::new(path)) {
        Ok(bundle) => {
            *out_model = Box::into_raw(Box::new(MogpModel { bundle }));
            MogpStatus::MogpOk
        }
        Err(e) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Release a model handle. Accepts NULL.
///
/// # Safety
/// `model` must be NULL or a pointer returned by [`mogp_model_load`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn mogp_model_free(model: *mut MogpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle from [`mogp_model_load`].
#[no_mangle]
pub unsafe extern "C" fn mogp_model_num_classes(model: *const MogpModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).bundle.n_classes()
}

/// # Safety
/// `model` must be a live handle from [`mogp_model_load`].
#[no_mangle]
pub unsafe extern "C" fn mogp_model_input_dim(model: *const MogpModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).bundle.kernel.input_dim
}

/// # Safety
/// `model` must be a live handle from [`mogp_model_load`].
#[no_mangle]
pub unsafe extern "C" fn mogp_model_output_dim(model: *const MogpModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).bundle.output_dim()
}

/// Copy the NUL-terminated name of class `index` into `buf`.
///
/// # Safety
/// `model` must be a live handle and `buf` writable for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mogp_model_class_name(
    model: *const MogpModel,
    index: size_t,
    buf: *mut c_char,
    buf_len: size_t,
) -> MogpStatus {
    if model.is_null() || buf.is_null() || buf_len == 0 {
        set_last_error("null pointer or empty buffer");
        return MogpStatus::MogpInvalidArgument;
    }
    let bundle = &(*model).bundle;
    let Some(name) = bundle.class_names.get(index) else {
        set_last_error("class index out of range");
        return MogpStatus::MogpInvalidArgument;
    };
    let bytes = name.as_bytes();
    if bytes.len() + 1 > buf_len {
        set_last_error("buffer too small for class name");
        return MogpStatus::MogpInvalidArgument;
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    MogpStatus::MogpOk
}

/// Classify one instance.
///
/// `inputs` holds `n_points` points of `input_dim` coordinates each,
/// point-major (point i starts at `inputs[i * input_dim]`); `outputs` holds
/// `n_points` samples of `output_dim` channels each, point-major. On
/// success `*out_class` is the winning class index and, when `out_scores`
/// is non-NULL, it receives one g-score per class (`num_classes` doubles).
///
/// # Safety
/// All pointers must be valid for the documented lengths; `out_scores` may
/// be NULL.
#[no_mangle]
pub unsafe extern "C" fn mogp_predict(
    model: *const MogpModel,
    inputs: *const f64,
    outputs: *const f64,
    n_points: size_t,
    out_class: *mut size_t,
    out_scores: *mut f64,
) -> MogpStatus {
    if model.is_null() || inputs.is_null() || outputs.is_null() || out_class.is_null() {
        set_last_error("null pointer argument");
        return MogpStatus::MogpInvalidArgument;
    }
    if n_points == 0 {
        set_last_error("instance needs at least one point");
        return MogpStatus::MogpInvalidArgument;
    }
    let bundle = &(*model).bundle;
    let p = bundle.kernel.input_dim;
    let d = bundle.output_dim();
    let in_slice = std::slice::from_raw_parts(inputs, n_points * p);
    let out_slice = std::slice::from_raw_parts(outputs, n_points * d);
    let (in_mat, out_mat) = build_matrices(in_slice, out_slice, p, d, n_points);
    let inst = match Instance::new(in_mat, out_mat) {
        Ok(i) => i,
        Err(e) => {
            set_last_error(&e.to_string());
            return status_of(&e);
        }
    };
    match predict(&inst, bundle) {
        Ok(pred) => {
            *out_class = pred.predicted_class;
            if !out_scores.is_null() {
                let scores = std::slice::from_raw_parts_mut(out_scores, bundle.n_classes());
                scores.copy_from_slice(&pred.scores);
            }
            MogpStatus::MogpOk
        }
        Err(e) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Point-major C buffers to the column-per-point matrices the core crate
/// uses. Kept separate so the unsafe entry points stay small.
mod nalgebra_shim {
    use mogp::nalgebra::DMatrix;

    pub fn build_matrices(
        inputs: &[f64],
        outputs: &[f64],
        p: usize,
        d: usize,
        n: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let in_mat = DMatrix::from_fn(p, n, |dim, j| inputs[j * p + dim]);
        let out_mat = DMatrix::from_fn(d, n, |dim, j| outputs[j * d + dim]);
        (in_mat, out_mat)
    }
}
