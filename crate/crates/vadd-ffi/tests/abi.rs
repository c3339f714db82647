//! End-to-end checks of the C ABI against direct library calls: the
//! boundary must add determinism-preserving plumbing and nothing else.

use std::ffi::{CStr, CString};
use std::ptr;

use vadd_core::checkpoint::save_checkpoint;
use vadd_core::datagen::{Dataset, DatasetName};
use vadd_core::eval::nll;
use vadd_core::masking::Schedule;
use vadd_core::models::{Denoiser, ModelDims, Recognizer};
use vadd_core::params::ParamStore;
use vadd_core::rng::{Rng, STREAM_CATEGORICAL, STREAM_INIT, STREAM_TIME};
use vadd_core::sampler::{sample_many, TimeGrid};

use vadd_ffi::{
    vadd_generate_dataset, vadd_last_error, vadd_model_free, vadd_model_info, vadd_model_load,
    vadd_nll, vadd_sample, VaddModel, VaddStatus,
};

fn write_latent_checkpoint(path: &std::path::Path, seed: u64) -> ParamStore {
    let dims = ModelDims { v: 12, n_positions: 2, d_latent: 2, width: 16 };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed, STREAM_INIT);
    Denoiser { dims: dims.clone(), has_latent: true }.init(&mut store, &mut rng);
    Recognizer { dims }.init(&mut store, &mut rng);
    save_checkpoint(path, &store, "ffitest").unwrap();
    store
}

fn load(path: &std::path::Path) -> *mut VaddModel {
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut VaddModel = ptr::null_mut();
    let status = unsafe { vadd_model_load(cpath.as_ptr(), &mut handle) };
    assert_eq!(status, VaddStatus::Ok, "load failed: {}", last_error());
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(vadd_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn load_info_sample_nll_round_trip_matches_direct_calls() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let store = write_latent_checkpoint(&path, 3);
    let handle = load(&path);

    let (mut v, mut n, mut d, mut latent) = (0u32, 0u32, 0u32, -1i32);
    let status =
        unsafe { vadd_model_info(handle, &mut v, &mut n, &mut d, &mut latent) };
    assert_eq!(status, VaddStatus::Ok);
    assert_eq!((v, n, d, latent), (12, 2, 2, 1));

    // Sampling through the ABI reproduces the library's draws.
    let count = 40usize;
    let mut tokens = vec![0u32; count * n as usize];
    let status = unsafe { vadd_sample(handle, 4, count, 99, 0, tokens.as_mut_ptr()) };
    assert_eq!(status, VaddStatus::Ok, "{}", last_error());
    let den = Denoiser {
        dims: ModelDims { v: 12, n_positions: 2, d_latent: 2, width: 16 },
        has_latent: true,
    };
    let direct = sample_many(
        &store,
        &den,
        &TimeGrid::new(4).unwrap(),
        count,
        &Rng::new(99, STREAM_CATEGORICAL),
        false,
        Schedule::Linear,
    )
    .unwrap();
    let flat: Vec<u32> = direct.iter().flatten().copied().collect();
    assert_eq!(tokens, flat);

    // Scoring through the ABI reproduces the library's estimate.
    let seqs: Vec<Vec<u32>> = tokens.chunks(2).map(|c| c.to_vec()).collect();
    let mut out = f64::NAN;
    let status =
        unsafe { vadd_nll(handle, tokens.as_ptr(), count, 8, 5, 7, &mut out) };
    assert_eq!(status, VaddStatus::Ok, "{}", last_error());
    let rec = Recognizer { dims: den.dims.clone() };
    let direct_nll = nll(
        &store,
        &den,
        Some(&rec),
        &seqs,
        8,
        5,
        &Rng::new(7, STREAM_TIME),
        Schedule::Linear,
        1e-5,
    )
    .unwrap();
    assert_eq!(out, direct_nll);

    unsafe { vadd_model_free(handle) };
}

#[test]
fn info_accepts_null_outputs_and_free_accepts_null() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    write_latent_checkpoint(&path, 4);
    let handle = load(&path);
    let status = unsafe {
        vadd_model_info(handle, ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(status, VaddStatus::Ok);
    unsafe { vadd_model_free(handle) };
    unsafe { vadd_model_free(ptr::null_mut()) };
}

#[test]
fn failures_set_statuses_and_messages() {
    // Null arguments.
    let mut handle: *mut VaddModel = ptr::null_mut();
    let status = unsafe { vadd_model_load(ptr::null(), &mut handle) };
    assert_eq!(status, VaddStatus::Usage);
    assert!(last_error().contains("null"), "message: {}", last_error());

    // Missing file.
    let cpath = CString::new("/definitely/not/here.json").unwrap();
    let status = unsafe { vadd_model_load(cpath.as_ptr(), &mut handle) };
    assert_eq!(status, VaddStatus::Io);
    assert!(handle.is_null());

    // Malformed checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let cpath = CString::new(bad.to_str().unwrap()).unwrap();
    let status = unsafe { vadd_model_load(cpath.as_ptr(), &mut handle) };
    assert_eq!(status, VaddStatus::Usage);
    assert!(!last_error().is_empty());

    // Null model into info.
    let status = unsafe {
        vadd_model_info(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(status, VaddStatus::Usage);
}

#[test]
fn dataset_generation_matches_the_library() {
    let count = 64usize;
    let mut tokens = vec![0u32; count * 2];
    let name = CString::new("swissroll").unwrap();
    let status =
        unsafe { vadd_generate_dataset(name.as_ptr(), count, 11, 2, tokens.as_mut_ptr()) };
    assert_eq!(status, VaddStatus::Ok, "{}", last_error());
    let ds = Dataset::generate(DatasetName::Swissroll, count, 11, 2).unwrap();
    let flat: Vec<u32> = ds.tokens.iter().flatten().copied().collect();
    assert_eq!(tokens, flat);

    let bad = CString::new("klein-bottle").unwrap();
    let status = unsafe { vadd_generate_dataset(bad.as_ptr(), count, 11, 2, tokens.as_mut_ptr()) };
    assert_eq!(status, VaddStatus::Usage);
    assert!(last_error().contains("klein-bottle"), "message: {}", last_error());
}
