//! C interface to medrecall.
//!
//! Every function returns an [`MrStatus`]; on failure the message is
//! available from [`mr_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`mr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use medrecall::cli::{self, Command};
use medrecall::config::RunConfig;
use medrecall::error::Error;
use medrecall::metrics;
use medrecall::responder::{parse_turns, Responder};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    MissingPrerequisite = 5,
    Numerical = 6,
    Io = 7,
    Failed = 8,
    Panic = 9,
}

/// Resolved run configuration.
pub struct MrConfig {
    inner: RunConfig,
}

/// Loaded generator, knowledge graph and retriever, ready to answer histories.
pub struct MrResponder {
    inner: Responder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => MrStatus::Config,
            Error::Argument(_) | Error::Validation(_) => MrStatus::InvalidArgument,
            Error::MissingPrerequisite { .. } => MrStatus::MissingPrerequisite,
            Error::Numerical { .. } => MrStatus::Numerical,
            Error::Io { .. } => MrStatus::Io,
            _ => MrStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            MrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MrStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(MrStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn texts<'a>(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n).iter().enumerate().map(|(i, &s)| text(s, &format!("{what}[{i}]"))).collect()
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn owned(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

unsafe fn put<T>(out: *mut T, value: T) {
    if !out.is_null() {
        *out = value;
    }
}

fn command(name: &str) -> Result<Command, Failure> {
    const ALL: [Command; 8] = [
        Command::Synth,
        Command::BuildGraph,
        Command::BuildRecall,
        Command::TrainRetriever,
        Command::Train,
        Command::Generate,
        Command::Evaluate,
        Command::Ablate,
    ];
    ALL.into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| Failure(MrStatus::InvalidArgument, format!("unknown command {name:?}")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn new_config(out: *mut *mut MrConfig, build: impl FnOnce() -> Result<RunConfig, Failure>) -> MrStatus {
    if out.is_null() {
        return guard(|| Err(null("out")));
    }
    *out = ptr::null_mut();
    guard(|| {
        *out = Box::into_raw(Box::new(MrConfig { inner: build()? }));
        Ok(())
    })
}

/// Parses a TOML configuration. Semantic checks such as the required seed
/// run when the configuration is used.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mr_config_from_toml(toml: *const c_char, out: *mut *mut MrConfig) -> MrStatus {
    new_config(out, || Ok(RunConfig::from_toml(text(toml, "toml")?)?))
}

/// Reads a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mr_config_load(path: *const c_char, out: *mut *mut MrConfig) -> MrStatus {
    new_config(out, || Ok(RunConfig::load(Path::new(text(path, "path")?))?))
}

/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn mr_config_set_seed(cfg: *mut MrConfig, seed: u64) -> MrStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.inner.seed = Some(seed);
        Ok(())
    })
}

/// Serializes the configuration back to TOML.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mr_config_to_toml(cfg: *const MrConfig, out: *mut *mut c_char) -> MrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = handle(cfg, "cfg")?;
        *out = owned(&cfg.inner.to_toml());
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mr_config_free(cfg: *mut MrConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs a pipeline command by its command-line name (`synth`, `train`, ...).
/// The one-line summary is stored in `summary` when it is not NULL.
///
/// # Safety
/// `cfg` must be a live handle; `name` a NUL-terminated string; `summary`
/// NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn mr_run_command(cfg: *const MrConfig, name: *const c_char, summary: *mut *mut c_char) -> MrStatus {
    put(summary, ptr::null_mut());
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        cfg.inner.validate()?;
        let cmd = command(text(name, "name")?)?;
        let s = cli::execute(cmd, &cfg.inner)?;
        put(summary, owned(&s));
        Ok(())
    })
}

/// Loads the trained generator (and retriever when the run uses knowledge).
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mr_responder_load(cfg: *const MrConfig, out: *mut *mut MrResponder) -> MrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = handle(cfg, "cfg")?;
        cfg.inner.validate()?;
        let inner = Responder::load(&cfg.inner)?;
        *out = Box::into_raw(Box::new(MrResponder { inner }));
        Ok(())
    })
}

/// Decodes the next doctor turn for a history of `n_turns` lines, each
/// prefixed with `patient:` or `doctor:`. `nonce` selects the sampling
/// stream. `recall` may be NULL.
///
/// # Safety
/// `responder` must be a live handle; `turns` must point to `n_turns`
/// NUL-terminated strings; `response` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mr_responder_respond(
    responder: *const MrResponder,
    turns: *const *const c_char,
    n_turns: usize,
    nonce: u64,
    response: *mut *mut c_char,
    recall: *mut *mut c_char,
) -> MrStatus {
    put(recall, ptr::null_mut());
    guard(|| {
        if response.is_null() {
            return Err(null("response"));
        }
        *response = ptr::null_mut();
        let r = handle(responder, "responder")?;
        let history = parse_turns(&texts(turns, n_turns, "turns")?)?;
        let reply = r.inner.respond(&history, nonce)?;
        *response = owned(&reply.response);
        put(recall, owned(&reply.recall));
        Ok(())
    })
}

/// # Safety
/// `responder` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mr_responder_free(responder: *mut MrResponder) {
    if !responder.is_null() {
        drop(Box::from_raw(responder));
    }
}

unsafe fn pairs(cands: *const *const c_char, refs: *const *const c_char, n: usize) -> Result<(Vec<String>, Vec<String>), Failure> {
    let own = |v: Vec<&str>| v.into_iter().map(String::from).collect();
    Ok((own(texts(cands, n, "candidates")?), own(texts(refs, n, "references")?)))
}

/// Corpus BLEU-`order` of `n` candidate/reference pairs.
///
/// # Safety
/// `candidates` and `references` must each point to `n` NUL-terminated
/// strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mr_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    order: u32,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(1..=4).contains(&order) {
            return Err(Failure(MrStatus::InvalidArgument, format!("BLEU order must be 1 to 4, got {order}")));
        }
        let (c, r) = pairs(candidates, references, n)?;
        *out = metrics::bleu(&c, &r, order as usize);
        Ok(())
    })
}

/// Distinct-bigram ratio over `n` candidates.
///
/// # Safety
/// `candidates` must point to `n` NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mr_distinct2(candidates: *const *const c_char, n: usize, out: *mut f64) -> MrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c: Vec<String> = texts(candidates, n, "candidates")?.into_iter().map(String::from).collect();
        *out = metrics::distinct2(&c);
        Ok(())
    })
}
