//! C ABI over `mpe-core`.
//!
//! Every fallible function returns an [`MpeStatus`]; on anything but
//! `MPE_STATUS_OK` the message is available from [`mpe_last_error`] on the same
//! thread. Strings handed out by the library are owned by the caller and must
//! be released with [`mpe_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use mpe_core::{EditMemory, Error, FactEdit, HashEmbedder, PromptEditor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Io = 4,
    Malformed = 5,
    InvariantViolated = 6,
    DuplicateEdit = 7,
    EmptyMemory = 8,
    UnknownOperator = 9,
    Backend = 10,
    Internal = 11,
}

impl From<&Error> for MpeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } | Error::Output(_) => MpeStatus::Io,
            Error::Malformed(_) | Error::UnknownSchemaVersion(_) => MpeStatus::Malformed,
            Error::Invariant(_) => MpeStatus::InvariantViolated,
            Error::DuplicateEdit(_) => MpeStatus::DuplicateEdit,
            Error::EmptyMemory => MpeStatus::EmptyMemory,
            Error::UnknownOperator(_) => MpeStatus::UnknownOperator,
            Error::CacheMiss(_) | Error::Backend(_) | Error::UnparseableResponse(_) => MpeStatus::Backend,
            Error::InvalidInput(_) | Error::NotActivating | Error::ProtocolOrder(_) | Error::MissingLabel { .. } => {
                MpeStatus::InvalidInput
            }
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

struct Failure(MpeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MpeStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpeStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside mpe".into());
            MpeStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MpeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(MpeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(MpeStatus::Internal, "result contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mpe_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn mpe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Edit memory with the hashing embedder and the rule-based prompt editor.
pub struct MpeMemory {
    memory: EditMemory,
    editor: PromptEditor,
}

#[no_mangle]
pub extern "C" fn mpe_memory_new() -> *mut MpeMemory {
    Box::into_raw(Box::new(MpeMemory {
        memory: EditMemory::new(Arc::new(HashEmbedder::default())),
        editor: PromptEditor::rule_based(),
    }))
}

/// # Safety
/// `memory` must come from [`mpe_memory_new`] and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn mpe_memory_free(memory: *mut MpeMemory) {
    if !memory.is_null() {
        drop(Box::from_raw(memory));
    }
}

/// # Safety
/// `memory` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mpe_memory_insert(
    memory: *mut MpeMemory,
    id: *const c_char,
    edit_prompt: *const c_char,
    target_prompt: *const c_char,
) -> MpeStatus {
    guard(|| {
        let m = out(memory, "memory")?;
        let edit = FactEdit::new(
            text(id, "id")?,
            text(edit_prompt, "edit_prompt")?,
            text(target_prompt, "target_prompt")?,
        );
        m.memory.insert(edit)?;
        Ok(())
    })
}

/// # Safety
/// `memory` must be a live handle and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn mpe_memory_len(memory: *const MpeMemory, len: *mut usize) -> MpeStatus {
    guard(|| {
        let m = memory.as_ref().ok_or_else(|| null("memory"))?;
        *out(len, "len")? = m.memory.len();
        Ok(())
    })
}

/// Rewrites `prompt` against the memory. On success `*rewritten` receives a
/// string to be released with [`mpe_string_free`].
///
/// # Safety
/// `memory` must be a live handle, `prompt` NUL-terminated and `rewritten` writable.
#[no_mangle]
pub unsafe extern "C" fn mpe_memory_edit(
    memory: *const MpeMemory,
    prompt: *const c_char,
    rewritten: *mut *mut c_char,
) -> MpeStatus {
    guard(|| {
        let m = memory.as_ref().ok_or_else(|| null("memory"))?;
        let slot = out(rewritten, "rewritten")?;
        let (edited, _) = m.editor.run(&m.memory, text(prompt, "prompt")?)?;
        *slot = owned_string(edited)?;
        Ok(())
    })
}

/// Sample mean and Bessel-corrected standard deviation of `len` scores.
///
/// # Safety
/// `scores` must point to `len` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpe_estimate(
    scores: *const f64,
    len: usize,
    mu_hat: *mut f64,
    sigma_hat: *mut f64,
) -> MpeStatus {
    guard(|| {
        let e = mpe_core::estimate(slice(scores, len, "scores")?)?;
        *out(mu_hat, "mu_hat")? = e.mu_hat;
        *out(sigma_hat, "sigma_hat")? = e.sigma_hat;
        Ok(())
    })
}

/// `op_name` is one of `mu-1sigma` .. `mu-3sigma`.
///
/// # Safety
/// `op_name` must be NUL-terminated and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn mpe_threshold(
    mu_hat: f64,
    sigma_hat: f64,
    op_name: *const c_char,
    result: *mut f64,
) -> MpeStatus {
    guard(|| {
        let t = mpe_core::threshold(mu_hat, sigma_hat, text(op_name, "op_name")?)?;
        *out(result, "result")? = t;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn mpe_decide(score: f64, threshold: f64) -> bool {
    mpe_core::criterion::decide(score, threshold)
}

/// # Safety
/// `rates` must point to `len` doubles and `result` be writable.
#[no_mangle]
pub unsafe extern "C" fn mpe_geometric_mean(rates: *const f64, len: usize, result: *mut f64) -> MpeStatus {
    guard(|| {
        let g = mpe_core::geometric_mean(slice(rates, len, "rates")?)?;
        *out(result, "result")? = g;
        Ok(())
    })
}

/// # Safety
/// `percent` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpe_retention(score_at_k: f64, score_at_1: f64, percent: *mut u32) -> MpeStatus {
    guard(|| {
        let r = mpe_core::retention(score_at_k, score_at_1)?;
        *out(percent, "percent")? = r;
        Ok(())
    })
}

/// Loads and validates a dataset file. `entries` may be null.
///
/// # Safety
/// `path` must be NUL-terminated; `entries`, if not null, writable.
#[no_mangle]
pub unsafe extern "C" fn mpe_dataset_validate(path: *const c_char, entries: *mut usize) -> MpeStatus {
    guard(|| {
        let ds = mpe_core::load_dataset(Path::new(text(path, "path")?))?;
        if let Some(n) = entries.as_mut() {
            *n = ds.entries.len();
        }
        Ok(())
    })
}
