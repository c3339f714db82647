//! C ABI over the core library: load a checkpoint, inspect it, draw samples,
//! score sequences, and generate reference datasets.
//!
//! The contract mirrors `include/vadd.h` (hand-maintained; the API is small
//! and additions must update both sides):
//!
//! * Every function returns a [`VaddStatus`]; `VADD_OK` is zero.
//! * On failure, a thread-local message is readable via [`vadd_last_error`]
//!   until the next failing call on the same thread.
//! * `VaddModel` is an opaque handle owned by the caller, released with
//!   [`vadd_model_free`]. Handles are immutable after load, so one handle
//!   may be shared across threads.
//! * Token buffers are row-major `u32` with `n_positions` entries per
//!   sequence; the caller allocates them.
//! * Panics never unwind across the boundary; they surface as
//!   `VADD_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vadd_core::checkpoint::load_checkpoint;
use vadd_core::datagen::{Dataset, DatasetName};
use vadd_core::error::VaddError;
use vadd_core::eval::nll;
use vadd_core::masking::{Schedule, Token, TokenSequence};
use vadd_core::models::{Denoiser, Recognizer};
use vadd_core::params::ParamStore;
use vadd_core::rng::{Rng, STREAM_CATEGORICAL, STREAM_TIME};
use vadd_core::sampler::{sample_many, TimeGrid};
use vadd_core::train::model_from_store;

/// Matches the default likelihood-weight floor used by the CLI.
const T_MIN: f64 = 1e-5;

/// Status codes shared with the C header.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VaddStatus {
    Ok = 0,
    /// A documented precondition was violated (null pointer, bad name,
    /// malformed checkpoint, wrong model flavor).
    Usage = 1,
    /// A numerical invariant broke while computing.
    Numerical = 2,
    /// The operating system refused a file operation.
    Io = 3,
    /// A panic was caught at the boundary; state may be incomplete.
    Panic = 4,
}

/// Opaque checkpoint handle: parameters plus the model views over them.
pub struct VaddModel {
    store: ParamStore,
    den: Denoiser,
    rec: Option<Recognizer>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: VaddStatus, message: &str) -> VaddStatus {
    let sanitized: Vec<u8> = message.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn fail_error(err: &VaddError) -> VaddStatus {
    let status = match err {
        VaddError::Usage(_) => VaddStatus::Usage,
        VaddError::NonFinite(_) => VaddStatus::Numerical,
        VaddError::CheckFailed(_) => VaddStatus::Usage,
        VaddError::Io(_) => VaddStatus::Io,
        VaddError::Json(_) => VaddStatus::Usage,
    };
    fail(status, &err.to_string())
}

/// Wrap a body so panics map to `VADD_ERR_PANIC` instead of unwinding out.
fn guarded(body: impl FnOnce() -> VaddStatus) -> VaddStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            fail(VaddStatus::Panic, &format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, VaddStatus> {
    if ptr.is_null() {
        return Err(fail(VaddStatus::Usage, &format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(VaddStatus::Usage, &format!("{what} is not valid UTF-8")))
}

/// Message from the most recent failure on this thread, as a NUL-terminated
/// string. The pointer stays valid until the next failing call on the same
/// thread. Never null; holds an empty string before any failure.
#[no_mangle]
pub extern "C" fn vadd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a checkpoint file into a model handle. On success writes the handle
/// through `out_model`; the caller owns it and must release it with
/// [`vadd_model_free`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid
/// pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn vadd_model_load(
    path: *const c_char,
    out_model: *mut *mut VaddModel,
) -> VaddStatus {
    guarded(|| {
        if out_model.is_null() {
            return fail(VaddStatus::Usage, "out_model is null");
        }
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(Path::new(path)) {
            Ok((store, _meta)) => {
                let (den, rec) = model_from_store(&store);
                let handle = Box::new(VaddModel { store, den, rec });
                unsafe { out_model.write(Box::into_raw(handle)) };
                VaddStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Release a handle returned by [`vadd_model_load`]. A null pointer is a
/// no-op.
///
/// # Safety
/// `model` must be null or a pointer previously returned by
/// [`vadd_model_load`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn vadd_model_free(model: *mut VaddModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Describe a loaded model: vocabulary size, sequence length, latent width,
/// and whether the latent pathway is present (1) or it is the plain
/// baseline (0). Any output pointer may be null to skip that field.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vadd_model_info(
    model: *const VaddModel,
    vocab: *mut u32,
    n_positions: *mut u32,
    d_latent: *mut u32,
    has_latent: *mut i32,
) -> VaddStatus {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            return fail(VaddStatus::Usage, "model is null");
        };
        unsafe {
            if !vocab.is_null() {
                vocab.write(m.den.dims.v as u32);
            }
            if !n_positions.is_null() {
                n_positions.write(m.den.dims.n_positions as u32);
            }
            if !d_latent.is_null() {
                d_latent.write(m.den.dims.d_latent as u32);
            }
            if !has_latent.is_null() {
                has_latent.write(m.den.has_latent as i32);
            }
        }
        VaddStatus::Ok
    })
}

/// Draw `count` sequences by ancestral sampling over `t_steps` reverse
/// steps and write them row-major into `out_tokens` (`count * n_positions`
/// entries). Equal seeds give equal samples. A nonzero `shared_z` reuses
/// one latent draw per trajectory across steps (ignored by the baseline).
///
/// # Safety
/// `model` must be a live handle and `out_tokens` writable for
/// `count * n_positions` entries.
#[no_mangle]
pub unsafe extern "C" fn vadd_sample(
    model: *const VaddModel,
    t_steps: u32,
    count: usize,
    seed: u64,
    shared_z: i32,
    out_tokens: *mut u32,
) -> VaddStatus {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            return fail(VaddStatus::Usage, "model is null");
        };
        if out_tokens.is_null() {
            return fail(VaddStatus::Usage, "out_tokens is null");
        }
        let grid = match TimeGrid::new(t_steps as usize) {
            Ok(g) => g,
            Err(e) => return fail_error(&e),
        };
        let base = Rng::new(seed, STREAM_CATEGORICAL);
        match sample_many(&m.store, &m.den, &grid, count, &base, shared_z != 0, Schedule::Linear) {
            Ok(samples) => {
                let n = m.den.dims.n_positions;
                for (i, seq) in samples.iter().enumerate() {
                    for (j, &tok) in seq.iter().enumerate() {
                        unsafe { out_tokens.add(i * n + j).write(tok) };
                    }
                }
                VaddStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Estimate the negative log-likelihood bound, in nats per sequence, of
/// `count` sequences supplied row-major in `tokens` (`count * n_positions`
/// entries, values below the vocabulary size). `k` importance samples and
/// `n_time_pairs` time draws mirror the CLI's eval command; equal seeds
/// give equal estimates. The result lands in `out_nll`.
///
/// # Safety
/// `model` must be a live handle, `tokens` readable for
/// `count * n_positions` entries, and `out_nll` writable.
#[no_mangle]
pub unsafe extern "C" fn vadd_nll(
    model: *const VaddModel,
    tokens: *const u32,
    count: usize,
    k: usize,
    n_time_pairs: usize,
    seed: u64,
    out_nll: *mut f64,
) -> VaddStatus {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            return fail(VaddStatus::Usage, "model is null");
        };
        if tokens.is_null() || out_nll.is_null() {
            return fail(VaddStatus::Usage, "tokens and out_nll must be non-null");
        }
        let n = m.den.dims.n_positions;
        let seqs: Vec<TokenSequence> = (0..count)
            .map(|i| (0..n).map(|j| unsafe { tokens.add(i * n + j).read() } as Token).collect())
            .collect();
        let base = Rng::new(seed, STREAM_TIME);
        match nll(
            &m.store,
            &m.den,
            m.rec.as_ref(),
            &seqs,
            k,
            n_time_pairs,
            &base,
            Schedule::Linear,
            T_MIN,
        ) {
            Ok(value) => {
                unsafe { out_nll.write(value) };
                VaddStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Generate `count` sequences of the named reference dataset
/// ("checkerboard", "swissroll", or "circles") and write their tokens
/// row-major into `out_tokens` (`count * 2` entries). `board` is the
/// checkerboard side length (even, at least 2); other datasets ignore it.
///
/// # Safety
/// `name` must be a valid NUL-terminated string and `out_tokens` writable
/// for `count * 2` entries.
#[no_mangle]
pub unsafe extern "C" fn vadd_generate_dataset(
    name: *const c_char,
    count: usize,
    seed: u64,
    board: u32,
    out_tokens: *mut u32,
) -> VaddStatus {
    guarded(|| {
        let name = match unsafe { utf8_arg(name, "name") } {
            Ok(n) => n,
            Err(status) => return status,
        };
        if out_tokens.is_null() {
            return fail(VaddStatus::Usage, "out_tokens is null");
        }
        let parsed = match DatasetName::parse(name) {
            Ok(p) => p,
            Err(e) => return fail_error(&e),
        };
        match Dataset::generate(parsed, count, seed, board as usize) {
            Ok(ds) => {
                for (i, seq) in ds.tokens.iter().enumerate() {
                    for (j, &tok) in seq.iter().enumerate() {
                        unsafe { out_tokens.add(i * seq.len() + j).write(tok) };
                    }
                }
                VaddStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}
