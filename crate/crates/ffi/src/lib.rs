//! C ABI for crossdraft.
//!
//! Every fallible function returns a [`CdStatus`]; on failure the message is
//! available from [`cd_last_error_message`] on the same thread. Models are
//! opaque [`CdModel`] handles released with [`cd_model_free`]; strings
//! returned by the library are released with [`cd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use crossdraft::harness::config::ExperimentConfig;
use crossdraft::harness::engine::{prefill_pair, speculative_generate, target_greedy, EngineOptions};
use crossdraft::harness::experiment::run_experiment;
use crossdraft::harness::metrics::{natural_divergence, speedup_model, SpeedupInputs};
use crossdraft::model::{copy_model, derive_draft, load_model, random_weights, save_model, CopyModelLayout};
use crossdraft::{Error, Model, ModelSpec};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Parameter = 4,
    Capacity = 5,
    Ordering = 6,
    State = 7,
    Consistency = 8,
    Format = 9,
    Config = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for CdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => CdStatus::Dimension,
            Error::Parameter(_) => CdStatus::Parameter,
            Error::Capacity(_) => CdStatus::Capacity,
            Error::Ordering(_) => CdStatus::Ordering,
            Error::State(_) => CdStatus::State,
            Error::Consistency(_) => CdStatus::Consistency,
            Error::Format(_) => CdStatus::Format,
            Error::Config(_) => CdStatus::Config,
            Error::Io { .. } => CdStatus::Io,
        }
    }
}

/// Opaque model handle.
pub struct CdModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CdStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> CdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside crossdraft".into());
            CdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> FfiResult<()> {
    if p.is_null() {
        return Err(Failure(CdStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CdStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const CdModel, what: &str) -> FfiResult<&'a Model> {
    non_null(m, what)?;
    Ok(&(*m).inner)
}

fn boxed(model: Model) -> *mut CdModel {
    Box::into_raw(Box::new(CdModel { inner: model }))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next crossdraft call on this thread.
#[no_mangle]
pub extern "C" fn cd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(path: *const c_char, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        *out = boxed(load_model(Path::new(path))?);
        Ok(())
    })
}

/// Builds a model with seeded random weights.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cd_model_random(
    vocab: usize,
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    d_ff: usize,
    max_pos: usize,
    seed: u64,
    out: *mut *mut CdModel,
) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        let spec = ModelSpec {
            n_layers,
            n_heads,
            d_model: n_heads * d_head,
            d_head,
            d_ff,
            vocab,
            max_pos,
            rope_base: 10_000.0,
        };
        *out = boxed(Model::new(spec, random_weights(&spec, seed)?)?);
        Ok(())
    })
}

/// Builds the hand-constructed copy (induction) model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_copy(max_pos: usize, seed: u64, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        let layout = CopyModelLayout {
            max_pos,
            seed,
            ..CopyModelLayout::default()
        };
        *out = boxed(copy_model(&layout)?);
        Ok(())
    })
}

/// A draft made of the first `keep_layers` blocks of `target`.
///
/// # Safety
/// `target` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_derive_draft(
    target: *const CdModel,
    keep_layers: usize,
    out: *mut *mut CdModel,
) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        let t = model_arg(target, "target")?;
        *out = boxed(derive_draft(t, keep_layers)?);
        Ok(())
    })
}

/// Writes a weight file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_model_save(model: *const CdModel, path: *const c_char) -> CdStatus {
    guard(|| {
        let m = model_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        save_model(m, Path::new(path))?;
        Ok(())
    })
}

/// Vocabulary size, layer count and maximum position of a model.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn cd_model_info(
    model: *const CdModel,
    vocab: *mut usize,
    n_layers: *mut usize,
    max_pos: *mut usize,
) -> CdStatus {
    guard(|| {
        let s = model_arg(model, "model")?.spec();
        for (p, v) in [(vocab, s.vocab), (n_layers, s.n_layers), (max_pos, s.max_pos)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(model: *mut CdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Target-only greedy decoding of `n_tokens` tokens into `out_tokens`.
///
/// # Safety
/// `prompt` must hold `prompt_len` tokens and `out_tokens` room for
/// `n_tokens`.
#[no_mangle]
pub unsafe extern "C" fn cd_greedy_generate(
    model: *const CdModel,
    prompt: *const usize,
    prompt_len: usize,
    n_tokens: usize,
    out_tokens: *mut usize,
) -> CdStatus {
    guard(|| {
        let m = model_arg(model, "model")?;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        if n_tokens > 0 {
            non_null(out_tokens, "out_tokens")?;
        }
        let gen = target_greedy(m, prompt, n_tokens)?;
        ptr::copy_nonoverlapping(gen.as_ptr(), out_tokens, gen.len());
        Ok(())
    })
}

/// Speculative decoding of `prompt` with `target` verifying `draft`.
/// `config_text` uses the experiment config format (policy, drafting,
/// temperature, seed, gen_tokens, ...; model and task keys are ignored).
/// Writes the first `gen_tokens` tokens and, when `tau` is non-null, the
/// average accepted length.
///
/// # Safety
/// Handles must be live; `prompt` must hold `prompt_len` tokens and
/// `out_tokens` room for `out_capacity` tokens.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cd_speculative_generate(
    target: *const CdModel,
    draft: *const CdModel,
    prompt: *const usize,
    prompt_len: usize,
    config_text: *const c_char,
    out_tokens: *mut usize,
    out_capacity: usize,
    tau: *mut f64,
) -> CdStatus {
    guard(|| {
        let t = model_arg(target, "target")?;
        let d = model_arg(draft, "draft")?;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        let cfg = ExperimentConfig::parse(str_arg(config_text, "config_text")?)?;
        if out_capacity < cfg.gen_tokens {
            return Err(Failure(
                CdStatus::BufferTooSmall,
                format!("need room for {} tokens, got {out_capacity}", cfg.gen_tokens),
            ));
        }
        non_null(out_tokens, "out_tokens")?;
        let pre = prefill_pair(t, d, prompt, cfg.score_heads.into())?;
        let gen = speculative_generate(t, d, &pre, &EngineOptions::from_config(&cfg))?;
        let out = gen.output();
        ptr::copy_nonoverlapping(out.as_ptr(), out_tokens, out.len());
        if !tau.is_null() {
            *tau = gen.tau();
        }
        Ok(())
    })
}

/// Runs a full experiment from config text and returns its report as JSON.
/// Release the string with [`cd_string_free`].
///
/// # Safety
/// `config_text` must be NUL-terminated and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_run_experiment(config_text: *const c_char, out_json: *mut *mut c_char) -> CdStatus {
    guard(|| {
        non_null(out_json, "out_json")?;
        let cfg = ExperimentConfig::parse(str_arg(config_text, "config_text")?)?;
        let e = run_experiment(&cfg)?;
        if let Some(dir) = &cfg.out_dir {
            e.write(dir)?;
        }
        let json = e.report.to_json_string()?;
        let c = CString::new(json).map_err(|_| Failure(CdStatus::Format, "report contains NUL".into()))?;
        *out_json = c.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Latency model: `ratio = (d * t_d / t_t + t_v / t_t) / tau`, `speedup =
/// 1 / ratio`.
///
/// # Safety
/// `ratio` and `speedup` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cd_speedup_model(
    tau: f64,
    d: f64,
    t_d: f64,
    t_t: f64,
    t_v: f64,
    n: usize,
    ratio: *mut f64,
    speedup: *mut f64,
) -> CdStatus {
    guard(|| {
        non_null(ratio, "ratio")?;
        non_null(speedup, "speedup")?;
        let s = speedup_model(&SpeedupInputs { tau, d, t_d, t_t, t_v, n })?;
        *ratio = s.ratio;
        *speedup = s.speedup;
        Ok(())
    })
}

/// `1 - sum(min(p, q))` over two distributions of length `len`.
///
/// # Safety
/// `p` and `q` must hold `len` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_natural_divergence(p: *const f64, q: *const f64, len: usize, out: *mut f64) -> CdStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = slice_arg(p, len, "p")?;
        let q = slice_arg(q, len, "q")?;
        *out = natural_divergence(p, q)?;
        Ok(())
    })
}
