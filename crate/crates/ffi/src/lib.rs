//! C ABI over the training core. Objects cross the boundary as opaque
//! handles; every fallible call returns an error code and stores a
//! message retrievable with `amx_last_error`. The checked-in header
//! lives at include/advmix.h.

use advmix_core::config::ExperimentConfig;
use advmix_core::data::{self, Dataset};
use advmix_core::nn::{load_checkpoint, save_checkpoint};
use advmix_core::tensor::Graph;
use advmix_core::train::{self, TrainSession};
use libc::{c_char, c_double, c_int};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

pub const AMX_OK: c_int = 0;
pub const AMX_ERR_NULL: c_int = 1;
pub const AMX_ERR_INVALID: c_int = 2;
pub const AMX_ERR_RUNTIME: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

/// Opaque dataset handle.
pub struct AmxDataset(Dataset);

/// Opaque trained-model handle (model plus its parameter store and
/// normalization statistics).
pub struct AmxModel(TrainSession);

/// # Safety
/// The returned pointer is owned by thread-local storage and valid
/// until the next failing call on the same thread.
#[no_mangle]
pub unsafe extern "C" fn amx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn amx_version() -> *const c_char {
    static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr() as *const c_char
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn amx_dataset_two_moons(
    n: usize,
    noise: c_double,
    seed: u64,
    out: *mut *mut AmxDataset,
) -> c_int {
    if out.is_null() {
        set_error("out pointer is null");
        return AMX_ERR_NULL;
    }
    if n == 0 || !noise.is_finite() || noise < 0.0 {
        set_error("two_moons: n must be > 0 and noise finite and >= 0");
        return AMX_ERR_INVALID;
    }
    let ds = data::gen_two_moons(n, noise, seed);
    *out = Box::into_raw(Box::new(AmxDataset(ds)));
    AMX_OK
}

/// # Safety
/// Paths must be valid NUL-terminated UTF-8; `out` as above.
#[no_mangle]
pub unsafe extern "C" fn amx_dataset_load_idx(
    images_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut AmxDataset,
) -> c_int {
    if out.is_null() {
        set_error("out pointer is null");
        return AMX_ERR_NULL;
    }
    let (Some(images), Some(labels)) = (cstr(images_path), cstr(labels_path)) else {
        set_error("idx paths must be non-null valid UTF-8");
        return AMX_ERR_NULL;
    };
    match data::load_idx(Path::new(images), Path::new(labels)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(AmxDataset(ds)));
            AMX_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            AMX_ERR_RUNTIME
        }
    }
}

/// # Safety
/// `ds` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn amx_dataset_len(ds: *const AmxDataset) -> i64 {
    match ds.as_ref() {
        Some(d) => d.0.len() as i64,
        None => -1,
    }
}

/// # Safety
/// `ds` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn amx_dataset_free(ds: *mut AmxDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train a model from a complete TOML experiment config, on the given
/// dataset handle, with the given run seed.
///
/// # Safety
/// `config_toml` must be NUL-terminated UTF-8; handles as above.
#[no_mangle]
pub unsafe extern "C" fn amx_train_toml(
    config_toml: *const c_char,
    dataset: *const AmxDataset,
    seed: u64,
    out: *mut *mut AmxModel,
) -> c_int {
    if out.is_null() {
        set_error("out pointer is null");
        return AMX_ERR_NULL;
    }
    let Some(text) = cstr(config_toml) else {
        set_error("config_toml must be non-null valid UTF-8");
        return AMX_ERR_NULL;
    };
    let Some(ds) = dataset.as_ref() else {
        set_error("dataset handle is null");
        return AMX_ERR_NULL;
    };
    let cfg = match ExperimentConfig::from_toml_str(text) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return AMX_ERR_INVALID;
        }
    };
    match train::train(&cfg.to_train_config(seed), &ds.0) {
        Ok((session, _)) => {
            *out = Box::into_raw(Box::new(AmxModel(session)));
            AMX_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            AMX_ERR_RUNTIME
        }
    }
}

/// # Safety
/// `model` must be a live handle; `path` valid UTF-8.
#[no_mangle]
pub unsafe extern "C" fn amx_model_save(model: *const AmxModel, path: *const c_char) -> c_int {
    let Some(m) = model.as_ref() else {
        set_error("model handle is null");
        return AMX_ERR_NULL;
    };
    let Some(p) = cstr(path) else {
        set_error("path must be non-null valid UTF-8");
        return AMX_ERR_NULL;
    };
    match save_checkpoint(Path::new(p), &m.0.graph, &m.0.model) {
        Ok(()) => AMX_OK,
        Err(e) => {
            set_error(&e.to_string());
            AMX_ERR_RUNTIME
        }
    }
}

/// # Safety
/// `path` valid UTF-8; `out` as above.
#[no_mangle]
pub unsafe extern "C" fn amx_model_load(path: *const c_char, out: *mut *mut AmxModel) -> c_int {
    if out.is_null() {
        set_error("out pointer is null");
        return AMX_ERR_NULL;
    }
    let Some(p) = cstr(path) else {
        set_error("path must be non-null valid UTF-8");
        return AMX_ERR_NULL;
    };
    let mut graph = Graph::new();
    match load_checkpoint(Path::new(p), &mut graph) {
        Ok(model) => {
            let session = TrainSession {
                graph,
                model,
                stats: None,
                declared_range: None,
            };
            *out = Box::into_raw(Box::new(AmxModel(session)));
            AMX_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            AMX_ERR_RUNTIME
        }
    }
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn amx_model_free(model: *mut AmxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Pristine and PGD robust accuracy of a model on a dataset.
///
/// # Safety
/// Handles must be live; the two output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn amx_eval_pgd(
    model: *mut AmxModel,
    dataset: *const AmxDataset,
    epsilon: c_double,
    steps: usize,
    seed: u64,
    out_pristine: *mut c_double,
    out_robust: *mut c_double,
) -> c_int {
    let Some(m) = model.as_mut() else {
        set_error("model handle is null");
        return AMX_ERR_NULL;
    };
    let Some(ds) = dataset.as_ref() else {
        set_error("dataset handle is null");
        return AMX_ERR_NULL;
    };
    if out_pristine.is_null() || out_robust.is_null() {
        set_error("output pointers must be non-null");
        return AMX_ERR_NULL;
    }
    if !(epsilon >= 0.0) || steps == 0 {
        set_error("epsilon must be >= 0 and steps >= 1");
        return AMX_ERR_INVALID;
    }
    match train::quick_robust_eval(&mut m.0, &ds.0, epsilon, steps, seed) {
        Ok((pristine, robust)) => {
            *out_pristine = pristine;
            *out_robust = robust;
            AMX_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            AMX_ERR_RUNTIME
        }
    }
}
