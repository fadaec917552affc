//! C ABI over the caption critic. A loaded model and its vocabulary live
//! behind an opaque handle; every call reports a status code and leaves a
//! human-readable message for [`capcritic_last_error`] on failure.
//!
//! Thread safety: handles are immutable after load and may be shared
//! across threads; the error message is thread-local.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use capcritic::corpus::{encode_caption, tokenize, Caption, Vocabulary};
use capcritic::critic::CriticModel;

/// Outcome of an FFI call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapCriticStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// The arguments or configuration were invalid.
    Usage = 2,
    /// The input data was malformed or inconsistent with the model.
    Data = 3,
    /// Unexpected internal failure.
    Internal = 4,
}

/// A trained critic bound to the vocabulary it was trained under.
pub struct CapCriticModel {
    _private: [u8; 0],
}

struct Inner {
    model: CriticModel,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes stripped");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &capcritic::Error) -> CapCriticStatus {
    match err.exit_code() {
        2 => CapCriticStatus::Usage,
        3 => CapCriticStatus::Data,
        _ => CapCriticStatus::Internal,
    }
}

fn fail(err: &capcritic::Error) -> CapCriticStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Message for the most recent failure on this thread. Valid until the
/// next FFI call from the same thread; never null.
#[no_mangle]
pub extern "C" fn capcritic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn capcritic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, CapCriticStatus> {
    if p.is_null() {
        set_error(&format!("{what} is null"));
        return Err(CapCriticStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        CapCriticStatus::Usage
    })
}

fn inner(h: *const CapCriticModel) -> Option<&'static Inner> {
    // The handle is created by capcritic_model_load and freed exactly once;
    // treating it as 'static inside one call is sound for live handles.
    unsafe { (h as *const Inner).as_ref() }
}

/// Loads a model file together with the vocabulary it was trained under.
/// Returns null on failure; see [`capcritic_last_error`]. Free with
/// [`capcritic_model_free`].
///
/// # Safety
/// `model_path` and `vocab_path` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn capcritic_model_load(
    model_path: *const c_char,
    vocab_path: *const c_char,
) -> *mut CapCriticModel {
    let body = || -> Result<*mut CapCriticModel, CapCriticStatus> {
        let model_path = read_str(model_path, "model path")?;
        let vocab_path = read_str(vocab_path, "vocabulary path")?;
        let vocab = Vocabulary::load(Path::new(vocab_path)).map_err(|e| fail(&e))?;
        let model = CriticModel::load(Path::new(model_path)).map_err(|e| fail(&e))?;
        if model.vocab_fingerprint != vocab.fingerprint() {
            set_error(&format!(
                "model {model_path} was trained under a different vocabulary than {vocab_path}"
            ));
            return Err(CapCriticStatus::Data);
        }
        let boxed = Box::new(Inner { model, vocab });
        Ok(Box::into_raw(boxed) as *mut CapCriticModel)
    };
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(h)) => h,
        Ok(Err(_)) => ptr::null_mut(),
        Err(_) => {
            set_error("internal panic during load");
            ptr::null_mut()
        }
    }
}

/// Releases a handle from [`capcritic_model_load`]. Null is a no-op.
///
/// # Safety
/// `h` must be a live handle or null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn capcritic_model_free(h: *mut CapCriticModel) {
    if !h.is_null() {
        drop(Box::from_raw(h as *mut Inner));
    }
}

/// Width of the image feature vector the model expects.
#[no_mangle]
pub extern "C" fn capcritic_model_image_dim(h: *const CapCriticModel) -> usize {
    inner(h).map_or(0, |m| m.model.config.d_img)
}

/// Whether scoring needs at least one reference caption (true whenever the
/// model conditions on a reference).
#[no_mangle]
pub extern "C" fn capcritic_model_needs_reference(h: *const CapCriticModel) -> bool {
    inner(h).is_some_and(|m| m.model.config.context_mode.uses_caption())
}

unsafe fn encode(m: &Inner, text: &str, what: &str) -> Result<Caption, CapCriticStatus> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        set_error(&format!("{what} holds no words"));
        return Err(CapCriticStatus::Data);
    }
    encode_caption(&tokens, &m.vocab, m.model.config.t_max).map_err(|e| fail(&e))
}

/// Scores `candidate` as the probability of being human-written, given the
/// image feature vector and optional reference captions.
///
/// `image` must hold [`capcritic_model_image_dim`] doubles. `references`
/// may be null (with `n_references` 0) for models that do not condition on
/// a reference; models that do require at least one. With several
/// references the score is averaged over each as context.
///
/// # Safety
/// Pointers must be valid for the lengths given; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn capcritic_score(
    h: *const CapCriticModel,
    image: *const f64,
    image_len: usize,
    references: *const *const c_char,
    n_references: usize,
    candidate: *const c_char,
    out_score: *mut f64,
) -> CapCriticStatus {
    let body = || -> Result<f64, CapCriticStatus> {
        let m = inner(h).ok_or_else(|| {
            set_error("model handle is null");
            CapCriticStatus::NullArgument
        })?;
        if out_score.is_null() {
            set_error("out_score is null");
            return Err(CapCriticStatus::NullArgument);
        }
        let d = m.model.config.d_img;
        if m.model.config.context_mode.uses_image() {
            if image.is_null() {
                set_error("image is null");
                return Err(CapCriticStatus::NullArgument);
            }
            if image_len != d {
                set_error(&format!(
                    "image holds {image_len} values, model expects {d}"
                ));
                return Err(CapCriticStatus::Usage);
            }
        }
        let image: &[f64] = if image.is_null() {
            &[]
        } else {
            slice::from_raw_parts(image, image_len)
        };
        let candidate = encode(m, read_str(candidate, "candidate")?, "candidate")?;

        if !m.model.config.context_mode.uses_caption() {
            return m.model.score(image, None, &candidate).map_err(|e| fail(&e));
        }
        if references.is_null() || n_references == 0 {
            set_error("this model conditions on a reference; pass at least one");
            return Err(CapCriticStatus::Usage);
        }
        let mut refs = Vec::with_capacity(n_references);
        for (i, &p) in slice::from_raw_parts(references, n_references)
            .iter()
            .enumerate()
        {
            let text = read_str(p, &format!("reference {i}"))?;
            refs.push(encode(m, text, &format!("reference {i}"))?);
        }
        m.model
            .score_with_all_references(image, &refs, &candidate)
            .map_err(|e| fail(&e))
    };
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(score)) => {
            *out_score = score;
            CapCriticStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic during scoring");
            CapCriticStatus::Internal
        }
    }
}
