//! C ABI over the defended-classifier runtime.
//!
//! Handles are opaque; every call returns a status code and writes results
//! through out-pointers. The header is generated by cbindgen into
//! `include/advrej.h` at build time.
//!
//! ```c
//! AdvrejClassifier *clf = NULL;
//! if (advrej_classifier_load("out/arch_nr/bundle.txt", &clf) != ADVREJ_STATUS_OK) { ... }
//! int32_t label; // -1 means rejected
//! double scores[11];
//! advrej_classifier_decide(clf, pixels, 784, &label, scores);
//! advrej_classifier_free(clf);
//! ```

use advrej::defended::{load_bundle, DefendedClassifier};
use libc::{c_char, c_double, c_int};
use std::ffi::CStr;
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status code returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvrejStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// The bundle or a referenced file could not be read.
    Io = 2,
    /// The bundle or a referenced file is malformed.
    Parse = 3,
    /// Input dimension does not match the classifier.
    Dimension = 4,
    /// Invalid argument value (e.g. non-UTF-8 path).
    InvalidArgument = 5,
    /// Unexpected internal failure.
    Internal = 6,
}

/// Opaque classifier handle.
pub struct AdvrejClassifier {
    inner: DefendedClassifier,
}

fn status_of(err: &advrej::Error) -> AdvrejStatus {
    use advrej::Error;
    match err {
        Error::Io(_) => AdvrejStatus::Io,
        Error::Parse { .. } | Error::UnsupportedVersion { .. } => AdvrejStatus::Parse,
        Error::DimensionMismatch { .. } => AdvrejStatus::Dimension,
        Error::Parameter(_) | Error::Config(_) => AdvrejStatus::InvalidArgument,
        _ => AdvrejStatus::Internal,
    }
}

/// Load a defended-classifier bundle (`bundle.txt` plus the model files it
/// references by relative path) and return an owned handle through `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. On success the handle must be released with
/// [`advrej_classifier_free`].
#[no_mangle]
pub unsafe extern "C" fn advrej_classifier_load(
    path: *const c_char,
    out: *mut *mut AdvrejClassifier,
) -> AdvrejStatus {
    if path.is_null() || out.is_null() {
        return AdvrejStatus::NullArgument;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return AdvrejStatus::InvalidArgument,
    };
    match catch_unwind(|| load_bundle(std::path::Path::new(path))) {
        Ok(Ok(inner)) => {
            *out = Box::into_raw(Box::new(AdvrejClassifier { inner }));
            AdvrejStatus::Ok
        }
        Ok(Err(e)) => status_of(&e),
        Err(_) => AdvrejStatus::Internal,
    }
}

/// Release a handle returned by [`advrej_classifier_load`].
///
/// # Safety
/// `clf` must be a handle from [`advrej_classifier_load`] that has not been
/// freed yet; null is tolerated.
#[no_mangle]
pub unsafe extern "C" fn advrej_classifier_free(clf: *mut AdvrejClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// Expected input dimension of the classifier; 0 when `clf` is null.
///
/// # Safety
/// `clf` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn advrej_classifier_input_dim(clf: *const AdvrejClassifier) -> usize {
    clf.as_ref().map_or(0, |c| c.inner.input_dim())
}

/// Number of classes (excluding the reject class); 0 when `clf` is null.
///
/// # Safety
/// `clf` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn advrej_classifier_class_count(clf: *const AdvrejClassifier) -> usize {
    clf.as_ref().map_or(0, |c| c.inner.class_count())
}

/// Classify one sample. Writes the predicted class to `out_label` (`-1`
/// when the sample is rejected as adversarial/off-manifold) and, when
/// `out_scores` is non-null, the `class_count + 1` extended scores with the
/// reject score at index 0.
///
/// # Safety
/// `clf` must be a live handle. `x` must point to `dim` readable doubles.
/// `out_label` must be valid; `out_scores`, when non-null, must have room
/// for `class_count + 1` doubles.
#[no_mangle]
pub unsafe extern "C" fn advrej_classifier_decide(
    clf: *const AdvrejClassifier,
    x: *const c_double,
    dim: usize,
    out_label: *mut c_int,
    out_scores: *mut c_double,
) -> AdvrejStatus {
    let Some(clf) = clf.as_ref() else {
        return AdvrejStatus::NullArgument;
    };
    if x.is_null() || out_label.is_null() {
        return AdvrejStatus::NullArgument;
    }
    if dim != clf.inner.input_dim() {
        return AdvrejStatus::Dimension;
    }
    let input = std::slice::from_raw_parts(x, dim);
    match catch_unwind(AssertUnwindSafe(|| clf.inner.decide(input))) {
        Ok(Ok(decision)) => {
            *out_label = decision.class_label().map_or(-1, |l| l as c_int);
            if !out_scores.is_null() {
                let out = std::slice::from_raw_parts_mut(out_scores, decision.extended_scores.len());
                out.copy_from_slice(&decision.extended_scores);
            }
            AdvrejStatus::Ok
        }
        Ok(Err(e)) => status_of(&e),
        Err(_) => AdvrejStatus::Internal,
    }
}

/// Total reference prototypes across the classifier's detector components,
/// the quantity that dominates per-query inference cost.
///
/// # Safety
/// `clf` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn advrej_classifier_prototype_total(clf: *const AdvrejClassifier) -> usize {
    clf.as_ref().map_or(0, |c| c.inner.total_prototypes())
}

/// Static toolkit version string.
#[no_mangle]
pub extern "C" fn advrej_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn advrej_status_message(status: AdvrejStatus) -> *const c_char {
    let msg: &'static str = match status {
        AdvrejStatus::Ok => "ok\0",
        AdvrejStatus::NullArgument => "null argument\0",
        AdvrejStatus::Io => "i/o error\0",
        AdvrejStatus::Parse => "malformed model file\0",
        AdvrejStatus::Dimension => "input dimension mismatch\0",
        AdvrejStatus::InvalidArgument => "invalid argument\0",
        AdvrejStatus::Internal => "internal error\0",
    };
    msg.as_ptr() as *const c_char
}
