//! Exercises the C ABI end to end from Rust: fixture checkpoints and an
//! index on disk, then every exported function including the error paths.

use std::ffi::{CStr, CString};
use std::fs;
use std::path::Path;
use std::ptr;

use sounder::encoders::{EncoderInput, Modality, ModelConfig, RetrieverModel};
use sounder::numerics::Tensor;
use sounder::retrieval::PassageIndex;
use sounder::trainer::save_checkpoint;
use sounder_capi::*;

fn model_config(modality: Modality, init_seed: u64) -> ModelConfig {
    ModelConfig {
        modality,
        d_model: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 24,
        t_max: 64,
        conv_hidden: 8,
        conv1: (4, 2),
        conv2: (3, 1),
        eps: 1e-5,
        init_seed,
        use_positions: true,
    }
}

fn passage_tokens(i: usize) -> Vec<u32> {
    (0..10).map(|j| ((i * 7 + j * 3) % 50) as u32).collect()
}

/// Frozen token model saved under `dir`, plus a 25-passage index under
/// `dir`/index named "main".
fn token_fixture(dir: &Path) -> RetrieverModel {
    let mut model =
        RetrieverModel::new(model_config(Modality::Tokens { vocab_size: 50 }, 7)).unwrap();
    model.freeze();
    save_checkpoint(&dir.join("model"), &model, 0, 0.0, "fixture").unwrap();

    let entries = (0..25)
        .map(|i| {
            let tokens = passage_tokens(i);
            let input = EncoderInput::Tokens {
                tokens: &tokens,
                utterance: "",
            };
            (format!("p-{i:04}"), model.embed_passage(&input).unwrap())
        })
        .collect();
    let index = PassageIndex::build(&model.fingerprint(), entries).unwrap();
    fs::create_dir_all(dir.join("index")).unwrap();
    index.save(&dir.join("index"), "main").unwrap();
    model
}

fn c_path(path: &Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let ptr = sounder_last_error();
    assert!(!ptr.is_null(), "a failing call must record a message");
    unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string()
}

#[test]
fn token_model_roundtrip_matches_the_core() {
    let tmp = tempfile::tempdir().unwrap();
    let model = token_fixture(tmp.path());

    let mut handle: *mut SounderModel = ptr::null_mut();
    let dir = c_path(&tmp.path().join("model"));
    assert_eq!(
        unsafe { sounder_model_open(dir.as_ptr(), &mut handle) },
        SounderStatus::Ok
    );
    assert!(!handle.is_null());

    let mut info = SounderModelInfo {
        modality: SounderModality::Frames,
        embedding_dim: 0,
        input_width: 0,
    };
    assert_eq!(
        unsafe { sounder_model_describe(handle, &mut info) },
        SounderStatus::Ok
    );
    assert_eq!(info.modality, SounderModality::Tokens);
    assert_eq!(info.embedding_dim, 16);
    assert_eq!(info.input_width, 50);

    let fp = unsafe { CStr::from_ptr(sounder_model_fingerprint(handle)) };
    assert_eq!(fp.to_str().unwrap(), model.fingerprint());

    let mut index: *mut SounderIndex = ptr::null_mut();
    let index_dir = c_path(&tmp.path().join("index"));
    let name = CString::new("main").unwrap();
    assert_eq!(
        unsafe { sounder_index_open(index_dir.as_ptr(), name.as_ptr(), &mut index) },
        SounderStatus::Ok
    );
    assert_eq!(unsafe { sounder_index_len(index) }, 25);
    assert_eq!(unsafe { sounder_index_dim(index) }, 16);
    assert_eq!(
        unsafe { sounder_index_check_model(index, handle) },
        SounderStatus::Ok
    );

    // Embedding through the boundary equals the core embedding.
    let question: Vec<u32> = vec![3, 17, 44, 8];
    let mut via_c = vec![0.0f64; 16];
    assert_eq!(
        unsafe {
            sounder_embed_tokens(
                handle,
                SounderRole::Question,
                question.as_ptr(),
                question.len(),
                via_c.as_mut_ptr(),
                via_c.len(),
            )
        },
        SounderStatus::Ok
    );
    let direct = model
        .embed_question(&EncoderInput::Tokens {
            tokens: &question,
            utterance: "",
        })
        .unwrap();
    assert_eq!(via_c, direct.data());

    // Search through the boundary equals the core search.
    let mut hits: *mut SounderHits = ptr::null_mut();
    assert_eq!(
        unsafe { sounder_index_search(index, via_c.as_ptr(), via_c.len(), 5, &mut hits) },
        SounderStatus::Ok
    );
    let expected = PassageIndex::load(&tmp.path().join("index"), "main")
        .unwrap()
        .search(&direct, 5)
        .unwrap();
    assert_eq!(unsafe { sounder_hits_len(hits) }, expected.len());
    for (i, hit) in expected.iter().enumerate() {
        let id = unsafe { CStr::from_ptr(sounder_hits_id(hits, i)) };
        assert_eq!(id.to_str().unwrap(), hit.id);
        assert_eq!(unsafe { sounder_hits_score(hits, i) }, hit.score);
    }
    assert!(unsafe { sounder_hits_id(hits, 5) }.is_null());
    assert!(unsafe { sounder_hits_score(hits, 5) }.is_nan());

    unsafe {
        sounder_hits_free(hits);
        sounder_index_free(index);
        sounder_model_free(handle);
    }
}

#[test]
fn frame_model_embeds_through_the_boundary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model =
        RetrieverModel::new(model_config(Modality::Frames { feature_dim: 5 }, 9)).unwrap();
    model.freeze();
    save_checkpoint(tmp.path(), &model, 0, 0.0, "fixture").unwrap();

    let mut handle: *mut SounderModel = ptr::null_mut();
    let dir = c_path(tmp.path());
    assert_eq!(
        unsafe { sounder_model_open(dir.as_ptr(), &mut handle) },
        SounderStatus::Ok
    );

    let frames: Vec<f64> = (0..60).map(|v| (v as f64) / 60.0 - 0.5).collect();
    let mut via_c = vec![0.0f64; 16];
    assert_eq!(
        unsafe {
            sounder_embed_frames(
                handle,
                SounderRole::Passage,
                frames.as_ptr(),
                12,
                5,
                via_c.as_mut_ptr(),
                via_c.len(),
            )
        },
        SounderStatus::Ok
    );
    let direct = model
        .embed_passage(&EncoderInput::Frames {
            frames: &Tensor::new(vec![12, 5], frames.clone()).unwrap(),
            utterance: "",
        })
        .unwrap();
    assert_eq!(via_c, direct.data());

    // A frame model refuses token input, and the message says so.
    let tokens = [1u32, 2, 3];
    let status = unsafe {
        sounder_embed_tokens(
            handle,
            SounderRole::Question,
            tokens.as_ptr(),
            tokens.len(),
            via_c.as_mut_ptr(),
            via_c.len(),
        )
    };
    assert_eq!(status, SounderStatus::Config);
    assert!(last_error().contains("token input"), "{}", last_error());

    unsafe { sounder_model_free(handle) };
}

#[test]
fn boundary_failures_report_status_and_message() {
    let tmp = tempfile::tempdir().unwrap();
    let model = token_fixture(tmp.path());

    // Missing checkpoint directory.
    let mut handle: *mut SounderModel = ptr::null_mut();
    let missing = c_path(&tmp.path().join("nowhere"));
    assert_eq!(
        unsafe { sounder_model_open(missing.as_ptr(), &mut handle) },
        SounderStatus::Io
    );
    assert!(handle.is_null());
    assert!(last_error().contains("nowhere"), "{}", last_error());

    // NULL arguments.
    assert_eq!(
        unsafe { sounder_model_open(ptr::null(), &mut handle) },
        SounderStatus::Argument
    );
    let mut info = SounderModelInfo {
        modality: SounderModality::Tokens,
        embedding_dim: 0,
        input_width: 0,
    };
    assert_eq!(
        unsafe { sounder_model_describe(ptr::null(), &mut info) },
        SounderStatus::Argument
    );
    assert!(unsafe { sounder_model_fingerprint(ptr::null()) }.is_null());
    assert_eq!(unsafe { sounder_index_len(ptr::null()) }, 0);

    let dir = c_path(&tmp.path().join("model"));
    assert_eq!(
        unsafe { sounder_model_open(dir.as_ptr(), &mut handle) },
        SounderStatus::Ok
    );
    let mut index: *mut SounderIndex = ptr::null_mut();
    let index_dir = c_path(&tmp.path().join("index"));
    let name = CString::new("main").unwrap();
    assert_eq!(
        unsafe { sounder_index_open(index_dir.as_ptr(), name.as_ptr(), &mut index) },
        SounderStatus::Ok
    );

    // Wrong output buffer size.
    let tokens = [1u32, 2];
    let mut small = vec![0.0f64; 4];
    assert_eq!(
        unsafe {
            sounder_embed_tokens(
                handle,
                SounderRole::Question,
                tokens.as_ptr(),
                tokens.len(),
                small.as_mut_ptr(),
                small.len(),
            )
        },
        SounderStatus::Argument
    );
    assert!(last_error().contains("out_len"), "{}", last_error());

    // Query dimension and depth mistakes map to the core's classes.
    let mut hits: *mut SounderHits = ptr::null_mut();
    assert_eq!(
        unsafe { sounder_index_search(index, small.as_ptr(), small.len(), 5, &mut hits) },
        SounderStatus::Data
    );
    let query = [0.0f64; 16];
    assert_eq!(
        unsafe { sounder_index_search(index, query.as_ptr(), query.len(), 0, &mut hits) },
        SounderStatus::Config
    );

    // A checkpoint with different weights fails the fingerprint check.
    let mut other =
        RetrieverModel::new(model_config(Modality::Tokens { vocab_size: 50 }, 8)).unwrap();
    other.freeze();
    assert_ne!(other.fingerprint(), model.fingerprint());
    save_checkpoint(&tmp.path().join("other"), &other, 0, 0.0, "fixture").unwrap();
    let mut other_handle: *mut SounderModel = ptr::null_mut();
    let other_dir = c_path(&tmp.path().join("other"));
    assert_eq!(
        unsafe { sounder_model_open(other_dir.as_ptr(), &mut other_handle) },
        SounderStatus::Ok
    );
    assert_eq!(
        unsafe { sounder_index_check_model(index, other_handle) },
        SounderStatus::Fingerprint
    );
    assert!(last_error().contains("fingerprint"), "{}", last_error());

    unsafe {
        sounder_model_free(other_handle);
        sounder_index_free(index);
        sounder_model_free(handle);
        // NULL frees are no-ops.
        sounder_model_free(ptr::null_mut());
        sounder_index_free(ptr::null_mut());
        sounder_hits_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_the_crate() {
    let version = unsafe { CStr::from_ptr(sounder_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
