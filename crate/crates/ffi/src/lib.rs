//! C ABI for lmlab.
//!
//! Objects are opaque handles created by `lm_*_new`/`lm_*_load` and released
//! with the matching `lm_*_free`. Every fallible call returns an `LmStatus`;
//! on failure `lm_last_error()` describes the most recent error on the
//! calling thread. Status codes for the library's error categories equal the
//! command-line exit codes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lmlab::analysis::{fit_scaling, ScalingPoint};
use lmlab::config::KvConfig;
use lmlab::grammar::{cyk_parse, inside_logprob, to_cnf, CnfGrammar, Grammar};
use lmlab::model::{decode, draw, read_checkpoint, write_checkpoint, Model, ModelConfig};
use lmlab::ngram::{fit_ngram, NGramModel};
use lmlab::rng::{derived, seeded};
use lmlab::{ErrorCategory, LanguageModel, LmError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Unsupported = 5,
    Io = 6,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 7,
    /// The output buffer is too small; the message names the needed size.
    BufferTooSmall = 8,
    /// A bug inside the library; the handle involved should be discarded.
    Panic = 9,
}

impl From<ErrorCategory> for LmStatus {
    fn from(c: ErrorCategory) -> Self {
        match c {
            ErrorCategory::Config => LmStatus::Config,
            ErrorCategory::Data => LmStatus::Data,
            ErrorCategory::Numeric => LmStatus::Numeric,
            ErrorCategory::Unsupported => LmStatus::Unsupported,
            ErrorCategory::Io => LmStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LmStatus, String);

impl From<LmError> for Failure {
    fn from(e: LmError) -> Self {
        Failure(e.category().into(), e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(LmStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, converting errors and panics into a status plus last-error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmStatus::Ok,
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} handle is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} output pointer is null")))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------- models

/// A trained or freshly initialized language model.
pub struct LmModel {
    model: Model,
}

/// Builds a model from `key=value` config text with parameters drawn from
/// `seed`.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_new(config: *const c_char, seed: u64, out: *mut *mut LmModel) -> LmStatus {
    guard(|| {
        let out = out_ptr(out, "model")?;
        let mut kv = KvConfig::parse(str_arg(config, "config")?)?;
        let c = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        let model = lmlab::train::init_params(c, seed)?;
        *out = Box::into_raw(Box::new(LmModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_load(path: *const c_char, out: *mut *mut LmModel) -> LmStatus {
    guard(|| {
        let out = out_ptr(out, "model")?;
        let path = str_arg(path, "path")?;
        let bytes = std::fs::read(path).map_err(LmError::from)?;
        let model = read_checkpoint(&mut bytes.as_slice(), None)?;
        *out = Box::into_raw(Box::new(LmModel { model }));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lm_model_save(model: *const LmModel, path: *const c_char) -> LmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = str_arg(path, "path")?;
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m.model)?;
        std::fs::write(path, bytes).map_err(LmError::from)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_model_free(model: *mut LmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lm_model_vocab_size(model: *const LmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().vocab_size())
}

/// Total number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lm_model_num_params(model: *const LmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_params())
}

/// Next-token logits after `prefix` into `out[0..vocab_size]`.
///
/// # Safety
/// `prefix` must hold `prefix_len` ids and `out` room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lm_model_next_logits(
    model: *const LmModel,
    prefix: *const usize,
    prefix_len: usize,
    out: *mut f64,
    out_len: usize,
) -> LmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let prefix = slice_arg(prefix, prefix_len, "prefix")?;
        let v = m.model.vocab_size();
        if out_len < v {
            return Err(Failure(
                LmStatus::BufferTooSmall,
                format!("logits need {v} entries, buffer holds {out_len}"),
            ));
        }
        if out.is_null() {
            return Err(invalid("logits buffer is null"));
        }
        let logits = m.model.next_logits(prefix)?;
        std::slice::from_raw_parts_mut(out, v).copy_from_slice(&logits);
        Ok(())
    })
}

/// Samples up to `max_len` tokens after `prompt` at `temperature`, stopping
/// after EOS. Writes the new ids to `out` and their count to `out_len`.
///
/// # Safety
/// `prompt` must hold `prompt_len` ids, `out` room for `max_len` ids, and
/// `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_sample(
    model: *const LmModel,
    prompt: *const usize,
    prompt_len: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
    out: *mut usize,
    out_len: *mut usize,
) -> LmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        let n_out = out_ptr(out_len, "length")?;
        if out.is_null() && max_len > 0 {
            return Err(invalid("sample buffer is null"));
        }
        let ids = lmlab::model::sample(&m.model, prompt, temperature, max_len, &mut derived(seed, "generate"))?;
        if !ids.is_empty() {
            std::slice::from_raw_parts_mut(out, ids.len()).copy_from_slice(&ids);
        }
        *n_out = ids.len();
        Ok(())
    })
}

/// Probabilities of `logits` at `temperature` (0 means argmax) into `out`.
///
/// # Safety
/// `logits` and `out` must both hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn lm_decode(logits: *const f64, n: usize, temperature: f64, out: *mut f64) -> LmStatus {
    guard(|| {
        let l = slice_arg(logits, n, "logits")?;
        if out.is_null() && n > 0 {
            return Err(invalid("probability buffer is null"));
        }
        let p = decode(l, temperature)?;
        if n > 0 {
            std::slice::from_raw_parts_mut(out, n).copy_from_slice(&p);
        }
        Ok(())
    })
}

/// Draws an index from the distribution `p` using `seed`.
///
/// # Safety
/// `p` must hold `n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_draw(p: *const f64, n: usize, seed: u64, out: *mut usize) -> LmStatus {
    guard(|| {
        let p = slice_arg(p, n, "probabilities")?;
        let out = out_ptr(out, "index")?;
        if p.is_empty() {
            return Err(Failure(LmStatus::Data, "empty distribution".into()));
        }
        *out = draw(p, &mut seeded(seed));
        Ok(())
    })
}

// ---------------------------------------------------------------- n-grams

pub struct LmNgram {
    model: NGramModel,
}

/// Fits an order-`order` model with add-`k` smoothing to `ids`.
///
/// # Safety
/// `ids` must hold `n` ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_ngram_fit(
    ids: *const usize,
    n: usize,
    order: usize,
    k: f64,
    vocab_size: usize,
    out: *mut *mut LmNgram,
) -> LmStatus {
    guard(|| {
        let out = out_ptr(out, "ngram")?;
        let ids = slice_arg(ids, n, "ids")?;
        let model = fit_ngram(ids, order, k, vocab_size)?;
        *out = Box::into_raw(Box::new(LmNgram { model }));
        Ok(())
    })
}

/// `P(w | context)`.
///
/// # Safety
/// `context` must hold `context_len` ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_ngram_prob(
    ngram: *const LmNgram,
    context: *const usize,
    context_len: usize,
    w: usize,
    out: *mut f64,
) -> LmStatus {
    guard(|| {
        let g = handle(ngram, "ngram")?;
        let ctx = slice_arg(context, context_len, "context")?;
        let out = out_ptr(out, "probability")?;
        *out = g.model.cond_prob(ctx, w)?;
        Ok(())
    })
}

/// # Safety
/// `ngram` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_ngram_free(ngram: *mut LmNgram) {
    if !ngram.is_null() {
        drop(Box::from_raw(ngram));
    }
}

// ---------------------------------------------------------------- grammars

pub struct LmGrammar {
    grammar: Grammar,
    cnf: CnfGrammar,
}

/// A built-in grammar by name, or grammar source text.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_grammar_new(spec: *const c_char, out: *mut *mut LmGrammar) -> LmStatus {
    guard(|| {
        let out = out_ptr(out, "grammar")?;
        let spec = str_arg(spec, "grammar")?;
        let grammar = match Grammar::builtin(spec) {
            Ok(g) => g,
            Err(_) => Grammar::parse(spec, "grammar")?,
        };
        let cnf = to_cnf(&grammar)?;
        *out = Box::into_raw(Box::new(LmGrammar { grammar, cnf }));
        Ok(())
    })
}

/// `ln P(input)` under the grammar (`-inf` outside the language).
///
/// # Safety
/// `grammar` must be a live handle, `input` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_grammar_logprob(grammar: *const LmGrammar, input: *const c_char, out: *mut f64) -> LmStatus {
    guard(|| {
        let g = handle(grammar, "grammar")?;
        let out = out_ptr(out, "log-probability")?;
        if !g.grammar.is_probabilistic() {
            return Err(Failure(LmStatus::Config, "grammar has no rule probabilities".into()));
        }
        let toks = g.grammar.tokens_from_str(str_arg(input, "input")?)?;
        *out = inside_logprob(g.cnf.grammar(), &toks)?;
        Ok(())
    })
}

/// Best parse of `input` as a bracketed string in `*out` (free it with
/// `lm_string_free`). A string outside the language is a data error.
///
/// # Safety
/// `grammar` must be a live handle, `input` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_grammar_parse(grammar: *const LmGrammar, input: *const c_char, out: *mut *mut c_char) -> LmStatus {
    guard(|| {
        let g = handle(grammar, "grammar")?;
        let out = out_ptr(out, "tree")?;
        let input = str_arg(input, "input")?;
        let toks = g.grammar.tokens_from_str(input)?;
        let tree = cyk_parse(g.cnf.grammar(), &toks)?
            .ok_or_else(|| LmError::Data(format!("{input:?} is not in the language")))?;
        let text = g.cnf.to_source_tree(&tree)?.render(&g.grammar);
        *out = CString::new(text).expect("tree text has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `grammar` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_grammar_free(grammar: *mut LmGrammar) {
    if !grammar.is_null() {
        drop(Box::from_raw(grammar));
    }
}

// ---------------------------------------------------------------- scaling

/// Fitted `L(P, D) = [(P_c/P)^(a_P/a_D) + D_c/D]^(a_D)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LmScalingFit {
    pub p_c: f64,
    pub d_c: f64,
    pub alpha_p: f64,
    pub alpha_d: f64,
    /// RMS of the log residuals.
    pub residual: f64,
}

/// Fits the scaling law to `n` points.
///
/// # Safety
/// `params`, `tokens` and `loss` must each hold `n` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lm_scaling_fit(
    params: *const f64,
    tokens: *const f64,
    loss: *const f64,
    n: usize,
    out: *mut LmScalingFit,
) -> LmStatus {
    guard(|| {
        let out = out_ptr(out, "fit")?;
        let (p, d, l) = (
            slice_arg(params, n, "params")?,
            slice_arg(tokens, n, "tokens")?,
            slice_arg(loss, n, "loss")?,
        );
        let pts: Vec<ScalingPoint> = (0..n)
            .map(|i| ScalingPoint {
                params: p[i],
                tokens: d[i],
                loss: l[i],
            })
            .collect();
        let f = fit_scaling(&pts)?;
        *out = LmScalingFit {
            p_c: f.p_c,
            d_c: f.d_c,
            alpha_p: f.alpha_p,
            alpha_d: f.alpha_d,
            residual: f.residual,
        };
        Ok(())
    })
}
