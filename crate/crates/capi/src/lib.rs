//! C ABI over the retrieval core: open trained checkpoints and passage
//! indexes, embed utterances, and run exact top-k search.
//!
//! Conventions, mirrored in the generated `include/sounder.h`:
//! - Every fallible call returns a `SounderStatus`; `SOUNDER_STATUS_OK` is 0.
//! - Out-parameters are written on success only.
//! - `sounder_last_error` returns a thread-local message describing the most
//!   recent failure on the calling thread; the pointer stays valid until the
//!   next failing call on that thread.
//! - Handles are created by `_open`/`_search` and released exactly once with
//!   the matching `_free`; passing NULL to a `_free` is a no-op.

// The safety contract (live pointers, NUL-terminated strings, buffer sizes
// as documented) is the conventions block above, not a per-function section.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sounder::encoders::{EncoderInput, Modality, RetrieverModel};
use sounder::numerics::Tensor;
use sounder::retrieval::PassageIndex;
use sounder::trainer::load_checkpoint;

/// Result of every fallible call. Values 2 through 6 match the exit codes
/// of the `sounder` binary; 1 and 7 are boundary-only conditions.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SounderStatus {
    Ok = 0,
    /// NULL pointer, non-UTF-8 string, or wrong buffer size at the boundary.
    Argument = 1,
    Config = 2,
    Io = 3,
    Data = 4,
    Numeric = 5,
    /// Index was built by a different model than the one supplied.
    Fingerprint = 6,
    /// Internal panic; indicates a bug in the library.
    Panic = 7,
}

/// Which tower of the bi-encoder embeds the utterance.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SounderRole {
    Question = 0,
    Passage = 1,
}

/// Input kind a model was trained on.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SounderModality {
    /// `sounder_embed_tokens`; `input_width` is the vocabulary size.
    Tokens = 0,
    /// `sounder_embed_frames`; `input_width` is the frame feature width.
    Frames = 1,
}

/// Shape summary of an open model.
#[repr(C)]
pub struct SounderModelInfo {
    pub modality: SounderModality,
    /// Length of every embedding the model produces.
    pub embedding_dim: usize,
    /// Vocabulary size for token models, feature width for frame models.
    pub input_width: usize,
}

/// A frozen retriever loaded from a checkpoint directory.
pub struct SounderModel {
    inner: RetrieverModel,
    fingerprint: CString,
}

/// An exact inner-product index over passage embeddings.
pub struct SounderIndex {
    inner: PassageIndex,
}

/// Ranked search results; read with the `sounder_hits_*` accessors.
pub struct SounderHits {
    ids: Vec<CString>,
    scores: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: SounderStatus, message: String) -> SounderStatus {
    let c = CString::new(message)
        .unwrap_or_else(|_| CString::new("error message contained a NUL byte").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
    status
}

fn fail_with(e: &sounder::Error) -> SounderStatus {
    let status = match e.exit_code() {
        2 => SounderStatus::Config,
        3 => SounderStatus::Io,
        4 => SounderStatus::Data,
        5 => SounderStatus::Numeric,
        6 => SounderStatus::Fingerprint,
        _ => SounderStatus::Config,
    };
    fail(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> SounderStatus) -> SounderStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(
            SounderStatus::Panic,
            "internal panic; this is a bug in sounder".into(),
        ),
    }
}

/// Ok(reference) or an already-recorded Argument failure.
macro_rules! need {
    ($ptr:expr, $what:literal) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => return fail(SounderStatus::Argument, concat!($what, " is NULL").into()),
        }
    };
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SounderStatus> {
    if ptr.is_null() {
        return Err(fail(SounderStatus::Argument, format!("{what} is NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(SounderStatus::Argument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(
    ptr: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], SounderStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(SounderStatus::Argument, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sounder_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the calling thread's most recent failure, or NULL if none.
#[no_mangle]
pub extern "C" fn sounder_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Load the checkpoint under `dir` and freeze it for inference.
#[no_mangle]
pub unsafe extern "C" fn sounder_model_open(
    dir: *const c_char,
    out: *mut *mut SounderModel,
) -> SounderStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SounderStatus::Argument, "out is NULL".into());
        }
        let dir = match str_arg(dir, "dir") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let (mut model, _) = match load_checkpoint(Path::new(dir)) {
            Ok(loaded) => loaded,
            Err(e) => return fail_with(&e),
        };
        model.freeze();
        let fingerprint = CString::new(model.fingerprint())
            .expect("fingerprint is hex");
        let handle = Box::new(SounderModel {
            inner: model,
            fingerprint,
        });
        out.write(Box::into_raw(handle));
        SounderStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn sounder_model_free(model: *mut SounderModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Modality, embedding length and input width of an open model.
#[no_mangle]
pub unsafe extern "C" fn sounder_model_describe(
    model: *const SounderModel,
    out: *mut SounderModelInfo,
) -> SounderStatus {
    guarded(|| {
        let model = need!(model, "model");
        if out.is_null() {
            return fail(SounderStatus::Argument, "out is NULL".into());
        }
        let (modality, input_width) = match model.inner.config.modality {
            Modality::Tokens { vocab_size } => (SounderModality::Tokens, vocab_size as usize),
            Modality::Frames { feature_dim } => (SounderModality::Frames, feature_dim),
        };
        out.write(SounderModelInfo {
            modality,
            embedding_dim: model.inner.config.d_model,
            input_width,
        });
        SounderStatus::Ok
    })
}

/// Hex digest over the model weights, owned by the handle.
/// Returns NULL if `model` is NULL.
#[no_mangle]
pub unsafe extern "C" fn sounder_model_fingerprint(model: *const SounderModel) -> *const c_char {
    model
        .as_ref()
        .map_or(std::ptr::null(), |m| m.fingerprint.as_ptr())
}

fn embed(
    model: &SounderModel,
    role: SounderRole,
    input: &EncoderInput,
    out: *mut f64,
    out_len: usize,
) -> SounderStatus {
    let dim = model.inner.config.d_model;
    if out.is_null() {
        return fail(SounderStatus::Argument, "out is NULL".into());
    }
    if out_len != dim {
        return fail(
            SounderStatus::Argument,
            format!("out_len is {out_len}, the model embeds into {dim}"),
        );
    }
    let embedding = match role {
        SounderRole::Question => model.inner.embed_question(input),
        SounderRole::Passage => model.inner.embed_passage(input),
    };
    match embedding {
        Ok(v) => {
            unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(v.data());
            SounderStatus::Ok
        }
        Err(e) => fail_with(&e),
    }
}

/// Embed a token utterance with one tower of a token model. `out` must hold
/// exactly `embedding_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sounder_embed_tokens(
    model: *const SounderModel,
    role: SounderRole,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> SounderStatus {
    guarded(|| {
        let model = need!(model, "model");
        let tokens = match slice_arg(tokens, len, "tokens") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let input = EncoderInput::Tokens {
            tokens,
            utterance: "",
        };
        embed(model, role, &input, out, out_len)
    })
}

/// Embed a frame utterance with one tower of a frame model. `frames` is
/// row-major `rows x cols`; `out` must hold exactly `embedding_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sounder_embed_frames(
    model: *const SounderModel,
    role: SounderRole,
    frames: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> SounderStatus {
    guarded(|| {
        let model = need!(model, "model");
        let len = match rows.checked_mul(cols) {
            Some(n) => n,
            None => return fail(SounderStatus::Argument, "rows * cols overflows".into()),
        };
        let data = match slice_arg(frames, len, "frames") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let tensor = match Tensor::new(vec![rows, cols], data.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail_with(&e),
        };
        let input = EncoderInput::Frames {
            frames: &tensor,
            utterance: "",
        };
        embed(model, role, &input, out, out_len)
    })
}

/// Load the index stored as `<name>.vecs` + `<name>.manifest` under `dir`.
#[no_mangle]
pub unsafe extern "C" fn sounder_index_open(
    dir: *const c_char,
    name: *const c_char,
    out: *mut *mut SounderIndex,
) -> SounderStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SounderStatus::Argument, "out is NULL".into());
        }
        let dir = match str_arg(dir, "dir") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let name = match str_arg(name, "name") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match PassageIndex::load(Path::new(dir), name) {
            Ok(index) => {
                out.write(Box::into_raw(Box::new(SounderIndex { inner: index })));
                SounderStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sounder_index_free(index: *mut SounderIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of passages in the index; 0 if `index` is NULL.
#[no_mangle]
pub unsafe extern "C" fn sounder_index_len(index: *const SounderIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Embedding dimension of the index; 0 if `index` is NULL.
#[no_mangle]
pub unsafe extern "C" fn sounder_index_dim(index: *const SounderIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.dim())
}

/// Ok when the index was built by exactly this model's weights.
#[no_mangle]
pub unsafe extern "C" fn sounder_index_check_model(
    index: *const SounderIndex,
    model: *const SounderModel,
) -> SounderStatus {
    guarded(|| {
        let index = need!(index, "index");
        let model = need!(model, "model");
        match index
            .inner
            .check_fingerprint(&model.inner.fingerprint())
        {
            Ok(()) => SounderStatus::Ok,
            Err(e) => fail_with(&e),
        }
    })
}

/// Exact top-k inner-product search. `query` must have the index dimension;
/// the result handle owns the hits until `sounder_hits_free`.
#[no_mangle]
pub unsafe extern "C" fn sounder_index_search(
    index: *const SounderIndex,
    query: *const f64,
    query_len: usize,
    k: usize,
    out: *mut *mut SounderHits,
) -> SounderStatus {
    guarded(|| {
        let index = need!(index, "index");
        if out.is_null() {
            return fail(SounderStatus::Argument, "out is NULL".into());
        }
        let data = match slice_arg(query, query_len, "query") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let tensor = match Tensor::new(vec![query_len], data.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail_with(&e),
        };
        match index.inner.search(&tensor, k) {
            Ok(hits) => {
                let mut ids = Vec::with_capacity(hits.len());
                let mut scores = Vec::with_capacity(hits.len());
                for hit in hits {
                    let id = CString::new(hit.id)
                        .unwrap_or_else(|_| CString::new("invalid id").unwrap());
                    ids.push(id);
                    scores.push(hit.score);
                }
                out.write(Box::into_raw(Box::new(SounderHits { ids, scores })));
                SounderStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Number of hits; 0 if `hits` is NULL.
#[no_mangle]
pub unsafe extern "C" fn sounder_hits_len(hits: *const SounderHits) -> usize {
    hits.as_ref().map_or(0, |h| h.ids.len())
}

/// Passage id of hit `i`, owned by the handle; NULL when out of range.
#[no_mangle]
pub unsafe extern "C" fn sounder_hits_id(hits: *const SounderHits, i: usize) -> *const c_char {
    hits.as_ref()
        .and_then(|h| h.ids.get(i))
        .map_or(std::ptr::null(), |id| id.as_ptr())
}

/// Score of hit `i`; NaN when out of range.
#[no_mangle]
pub unsafe extern "C" fn sounder_hits_score(hits: *const SounderHits, i: usize) -> f64 {
    hits.as_ref()
        .and_then(|h| h.scores.get(i))
        .copied()
        .unwrap_or(f64::NAN)
}

#[no_mangle]
pub unsafe extern "C" fn sounder_hits_free(hits: *mut SounderHits) {
    if !hits.is_null() {
        drop(Box::from_raw(hits));
    }
}
