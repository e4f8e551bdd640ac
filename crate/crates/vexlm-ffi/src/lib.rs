//! C ABI over the vexlm toolkit. Handles are opaque pointers created and
//! destroyed by this library; every fallible call returns a [`VexlmStatus`]
//! and leaves a human-readable message retrievable via
//! [`vexlm_last_error`]. Strings returned through out-parameters are
//! allocated here and must be released with [`vexlm_string_free`]; id
//! buffers with [`vexlm_ids_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vexlm::corpus::TemplateSet;
use vexlm::infer::{
    apply_threshold, disambiguate, predict_candidates, InferOptions, LocalResolver,
    RelationThresholds,
};
use vexlm::model::{load_checkpoint, MlmModel};
use vexlm::schema::RelationSchema;
use vexlm::tokenizer::{TokenSequence, Vocabulary};

/// Status code of every fallible FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VexlmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Model = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let msg = message.into();
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("error message had NUL").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Opaque vocabulary handle.
pub struct VexlmVocab {
    inner: Vocabulary,
}

/// Opaque predictor handle: model, vocabulary, templates, schema, optional
/// thresholds and resolver table.
pub struct VexlmPredictor {
    model: MlmModel<f32>,
    vocab: Vocabulary,
    templates: TemplateSet,
    schema: Option<RelationSchema>,
    thresholds: Option<RelationThresholds>,
    resolver: LocalResolver,
}

fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, VexlmStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(VexlmStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        VexlmStatus::InvalidUtf8
    })
}

fn guard<F: FnOnce() -> VexlmStatus>(f: F) -> VexlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            VexlmStatus::Internal
        }
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn vexlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread, or NULL. Free with
/// `vexlm_string_free`.
#[no_mangle]
pub extern "C" fn vexlm_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(c) => c.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must have been returned by a vexlm function and not freed before.
#[no_mangle]
pub unsafe extern "C" fn vexlm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Release an id buffer returned by `vexlm_vocab_tokenize`.
///
/// # Safety
/// `ids`/`len` must come from a vexlm call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vexlm_ids_free(ids: *mut u32, len: usize) {
    if !ids.is_null() {
        drop(Vec::from_raw_parts(ids, len, len));
    }
}

/// Load a vocabulary file (JSON lines). On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vexlm_vocab_load(
    path: *const c_char,
    out: *mut *mut VexlmVocab,
) -> VexlmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return VexlmStatus::NullArgument;
        }
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Vocabulary::load(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(VexlmVocab { inner }));
                VexlmStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                VexlmStatus::Parse
            }
        }
    })
}

/// # Safety
/// `vocab` must be a handle from `vexlm_vocab_load`, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vexlm_vocab_free(vocab: *mut VexlmVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Total number of token ids (including the five specials); 0 on NULL.
///
/// # Safety
/// `vocab` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vexlm_vocab_size(vocab: *const VexlmVocab) -> u64 {
    if vocab.is_null() {
        return 0;
    }
    (*vocab).inner.size() as u64
}

/// Tokenize text into ids. The caller owns the buffer written to
/// `out_ids`/`out_len` and frees it with `vexlm_ids_free`.
///
/// # Safety
/// All pointers must be valid; `vocab` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vexlm_vocab_tokenize(
    vocab: *const VexlmVocab,
    text: *const c_char,
    entity_matching: bool,
    out_ids: *mut *mut u32,
    out_len: *mut usize,
) -> VexlmStatus {
    guard(|| {
        if vocab.is_null() || out_ids.is_null() || out_len.is_null() {
            set_error("null argument");
            return VexlmStatus::NullArgument;
        }
        let text = match cstr_arg(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let seq = (*vocab).inner.tokenize(text, entity_matching);
        let mut ids = seq.ids.clone();
        ids.shrink_to_fit();
        *out_len = ids.len();
        *out_ids = ids.as_mut_ptr();
        std::mem::forget(ids);
        VexlmStatus::Ok
    })
}

/// Render ids back to text (ids are treated as word starts). The result goes
/// to `out_text`; free with `vexlm_string_free`.
///
/// # Safety
/// `ids` must point at `len` readable u32 values; other pointers valid.
#[no_mangle]
pub unsafe extern "C" fn vexlm_vocab_detokenize(
    vocab: *const VexlmVocab,
    ids: *const u32,
    len: usize,
    out_text: *mut *mut c_char,
) -> VexlmStatus {
    guard(|| {
        if vocab.is_null() || ids.is_null() || out_text.is_null() {
            set_error("null argument");
            return VexlmStatus::NullArgument;
        }
        let ids = std::slice::from_raw_parts(ids, len).to_vec();
        let starts = vec![true; ids.len()];
        let seq = TokenSequence::new(ids, starts);
        match (*vocab).inner.detokenize(&seq) {
            Ok(text) => match CString::new(text) {
                Ok(c) => {
                    *out_text = c.into_raw();
                    VexlmStatus::Ok
                }
                Err(_) => {
                    set_error("detokenized text contained NUL");
                    VexlmStatus::Internal
                }
            },
            Err(e) => {
                set_error(e.to_string());
                VexlmStatus::Model
            }
        }
    })
}

/// Load a predictor from a checkpoint directory plus its side files.
/// `schema_path`, `thresholds_path` and `entity_dump_path` may be NULL.
///
/// # Safety
/// Paths must be NULL or valid NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vexlm_predictor_load(
    model_dir: *const c_char,
    vocab_path: *const c_char,
    templates_path: *const c_char,
    schema_path: *const c_char,
    thresholds_path: *const c_char,
    entity_dump_path: *const c_char,
    out: *mut *mut VexlmPredictor,
) -> VexlmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return VexlmStatus::NullArgument;
        }
        let model_dir = match cstr_arg(model_dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let vocab_path = match cstr_arg(vocab_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let templates_path = match cstr_arg(templates_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let model = match load_checkpoint(Path::new(model_dir)) {
            Ok(m) => m,
            Err(e) => {
                set_error(e.to_string());
                return VexlmStatus::Io;
            }
        };
        let full_vocab = match Vocabulary::load(Path::new(vocab_path)) {
            Ok(v) => v,
            Err(e) => {
                set_error(e.to_string());
                return VexlmStatus::Parse;
            }
        };
        let vocab = if model.config.vocab_size == full_vocab.base_size() {
            full_vocab.base_view()
        } else {
            full_vocab
        };
        if model.config.vocab_size != vocab.size() {
            set_error(format!(
                "checkpoint vocab size {} does not match vocabulary {}",
                model.config.vocab_size,
                vocab.size()
            ));
            return VexlmStatus::Model;
        }
        let templates = match TemplateSet::load(Path::new(templates_path)) {
            Ok(t) => t,
            Err(e) => {
                set_error(e.to_string());
                return VexlmStatus::Parse;
            }
        };
        let schema = if schema_path.is_null() {
            None
        } else {
            match cstr_arg(schema_path) {
                Ok(p) => match RelationSchema::load(Path::new(p)) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        set_error(e.to_string());
                        return VexlmStatus::Parse;
                    }
                },
                Err(s) => return s,
            }
        };
        let thresholds = if thresholds_path.is_null() {
            None
        } else {
            match cstr_arg(thresholds_path) {
                Ok(p) => match RelationThresholds::load(Path::new(p)) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        set_error(e.to_string());
                        return VexlmStatus::Parse;
                    }
                },
                Err(s) => return s,
            }
        };
        let resolver = if entity_dump_path.is_null() {
            LocalResolver::default()
        } else {
            match cstr_arg(entity_dump_path) {
                Ok(p) => {
                    let schema_for_dump = schema.clone().unwrap_or_else(RelationSchema::bundled);
                    match vexlm::vocab_build::merge_kg_dump(
                        Vec::new(),
                        Some(Path::new(p)),
                        &schema_for_dump,
                    ) {
                        Ok((records, _)) => LocalResolver::from_records(&records),
                        Err(e) => {
                            set_error(e.to_string());
                            return VexlmStatus::Parse;
                        }
                    }
                }
                Err(s) => return s,
            }
        };
        *out = Box::into_raw(Box::new(VexlmPredictor {
            model,
            vocab,
            templates,
            schema,
            thresholds,
            resolver,
        }));
        VexlmStatus::Ok
    })
}

/// # Safety
/// `pred` must be a handle from `vexlm_predictor_load`, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vexlm_predictor_free(pred: *mut VexlmPredictor) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// Predict object candidates for (subject, relation) and return them as a
/// JSON array of `{surface, token_id, score, entity_id}` objects, sorted by
/// descending score. With `apply_thresholds` and loaded thresholds, the list
/// is cut at the relation's threshold and disambiguated against the loaded
/// entity dump. Free the string with `vexlm_string_free`.
///
/// # Safety
/// `pred` must be a live handle; strings valid; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn vexlm_predict_json(
    pred: *const VexlmPredictor,
    subject: *const c_char,
    relation: *const c_char,
    top_k: usize,
    apply_thresholds: bool,
    out_json: *mut *mut c_char,
) -> VexlmStatus {
    guard(|| {
        if pred.is_null() || out_json.is_null() {
            set_error("null argument");
            return VexlmStatus::NullArgument;
        }
        let p = &*pred;
        let subject = match cstr_arg(subject) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let relation = match cstr_arg(relation) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let opts = InferOptions {
            top_k: top_k.max(1),
            ..Default::default()
        };
        let mut candidates = match predict_candidates(
            &p.model,
            &p.vocab,
            subject,
            relation,
            &p.templates,
            p.schema.as_ref(),
            &opts,
        ) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return VexlmStatus::Model;
            }
        };
        if apply_thresholds {
            if let Some(t) = &p.thresholds {
                candidates = apply_threshold(&candidates, relation, t);
            }
            if let Some(schema) = &p.schema {
                candidates = vexlm::infer::validate_numeric(&candidates, relation, schema);
                let numeric = schema.is_numeric(relation);
                if !numeric {
                    candidates = match disambiguate(&candidates, &p.resolver) {
                        Ok(c) => c,
                        Err(e) => {
                            set_error(e.to_string());
                            return VexlmStatus::Internal;
                        }
                    };
                }
            }
        }
        let json = serde_json::to_string(&candidates).expect("candidates serialize");
        match CString::new(json) {
            Ok(c) => {
                *out_json = c.into_raw();
                VexlmStatus::Ok
            }
            Err(_) => {
                set_error("JSON contained NUL");
                VexlmStatus::Internal
            }
        }
    })
}

/// Score one prediction set against a gold set (both JSON arrays of strings)
/// with the challenge convention; writes precision/recall/F1.
///
/// # Safety
/// Strings must be valid; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vexlm_score_sample(
    pred_json: *const c_char,
    gold_json: *const c_char,
    out_precision: *mut f64,
    out_recall: *mut f64,
    out_f1: *mut f64,
) -> VexlmStatus {
    guard(|| {
        if out_precision.is_null() || out_recall.is_null() || out_f1.is_null() {
            set_error("null out pointer");
            return VexlmStatus::NullArgument;
        }
        let pred = match cstr_arg(pred_json) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let gold = match cstr_arg(gold_json) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let pred: Vec<String> = match serde_json::from_str(pred) {
            Ok(v) => v,
            Err(e) => {
                set_error(format!("pred_json: {e}"));
                return VexlmStatus::Parse;
            }
        };
        let gold: Vec<String> = match serde_json::from_str(gold) {
            Ok(v) => v,
            Err(e) => {
                set_error(format!("gold_json: {e}"));
                return VexlmStatus::Parse;
            }
        };
        let m = vexlm::eval::score_sample(&pred, &gold);
        *out_precision = m.precision;
        *out_recall = m.recall;
        *out_f1 = m.f1;
        VexlmStatus::Ok
    })
}
