//! C interface: load checkpoints, generate responses, re-rank candidates
//! and score text. Every function returns a `CtxgenStatus`; on failure the
//! message is available from `ctxgen_last_error` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ctxgen::condlm::{context_ids, generate, CondLm, SampleOptions};
use ctxgen::corpus::{
    detokenize, extract_context, relexicalize_lenient, slot_map_from_da, Dialogue, DialogueAct, Turn,
};
use ctxgen::ctxencoder::ContextEncoder;
use ctxgen::numkernel::Checkpoint;
use ctxgen::reranker::Reranker;
use ctxgen::sclstm::{beam_decode, DecodeOptions, Sclstm};
use ctxgen::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtxgenStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    Panic = 6,
}

pub struct CtxgenEncoder(ContextEncoder);
pub struct CtxgenSclstm(Sclstm);
pub struct CtxgenCondlm(CondLm);
pub struct CtxgenReranker(Reranker);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CtxgenStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtxgenStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            let code = e.exit_code();
            set_error(e.to_string());
            match code {
                1 => CtxgenStatus::Usage,
                3 => CtxgenStatus::Numeric,
                _ => CtxgenStatus::Data,
            }
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            CtxgenStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            CtxgenStatus::InvalidUtf8
        }
        Err(_) => {
            set_error("internal panic".into());
            CtxgenStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nuls removed").into_raw()
}

/// Dialogue of `history` turns (alternating, user first), the user
/// utterance and a system turn carrying `da`.
unsafe fn build_dialogue(
    history: *const *const c_char,
    history_len: usize,
    user: &str,
    da: &DialogueAct,
) -> Result<Dialogue, Fail> {
    let mut turns = Vec::with_capacity(history_len + 2);
    if history_len > 0 {
        if history.is_null() {
            return Err(Fail::Null("history"));
        }
        for i in 0..history_len {
            let t = str_arg(*history.add(i), "history entry")?;
            turns.push(if i % 2 == 0 { Turn::user(t) } else { Turn::system(t, None) });
        }
        if history_len % 2 == 1 {
            return Err(Error::Usage("history must end with a system turn".into()).into());
        }
    }
    turns.push(Turn::user(user));
    turns.push(Turn::system("", Some(da.clone())));
    Ok(Dialogue { id: "ffi".into(), turns })
}

/// Message of the last failure on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ctxgen_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ctxgen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

macro_rules! loader {
    ($load:ident, $free:ident, $handle:ident, $ty:ty) => {
        /// Loads a checkpoint into a new handle.
        ///
        /// # Safety
        /// `path` must be a valid C string and `out` a valid pointer.
        #[no_mangle]
        pub unsafe extern "C" fn $load(path: *const c_char, out: *mut *mut $handle) -> CtxgenStatus {
            guard(|| {
                let out = out_ptr(out, "out")?;
                *out = ptr::null_mut();
                let path = str_arg(path, "path")?;
                let model = <$ty>::from_checkpoint(Checkpoint::load(Path::new(path))?)?;
                *out = Box::into_raw(Box::new($handle(model)));
                Ok(())
            })
        }

        /// Releases a handle. Null is ignored.
        ///
        /// # Safety
        /// `h` must come from the matching load function and not be freed twice.
        #[no_mangle]
        pub unsafe extern "C" fn $free(h: *mut $handle) {
            if !h.is_null() {
                drop(Box::from_raw(h));
            }
        }
    };
}

loader!(ctxgen_encoder_load, ctxgen_encoder_free, CtxgenEncoder, ContextEncoder);
loader!(ctxgen_sclstm_load, ctxgen_sclstm_free, CtxgenSclstm, Sclstm);
loader!(ctxgen_condlm_load, ctxgen_condlm_free, CtxgenCondlm, CondLm);
loader!(ctxgen_reranker_load, ctxgen_reranker_free, CtxgenReranker, Reranker);

/// Beam-decodes a response for `da`. `encoder` may be null for a
/// zero-context generator. The result is written to `*out` and must be
/// released with `ctxgen_string_free`.
///
/// # Safety
/// Pointers must be valid; `history` must hold `history_len` C strings.
#[no_mangle]
pub unsafe extern "C" fn ctxgen_sclstm_generate(
    model: *const CtxgenSclstm,
    encoder: *const CtxgenEncoder,
    history: *const *const c_char,
    history_len: usize,
    user: *const c_char,
    da: *const c_char,
    beam: usize,
    out: *mut *mut c_char,
) -> CtxgenStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = &handle(model, "model")?.0;
        let user = str_arg(user, "user")?;
        let da: DialogueAct = str_arg(da, "da")?.parse()?;
        let ctx = match (m.config.context, encoder.as_ref()) {
            (Some(spec), Some(enc)) => {
                let d = build_dialogue(history, history_len, user, &da)?;
                Some(enc.0.encode(&extract_context(&d, d.turns.len() - 1, spec)?)?)
            }
            (Some(_), None) => return Err(Fail::Null("encoder")),
            (None, _) => None,
        };
        let opts = DecodeOptions { beam, ..Default::default() };
        let hyps = beam_decode(m, m.da_index(&da)?, ctx.as_deref(), &opts)?;
        let best = hyps.first().ok_or_else(|| Error::Data("empty beam".into()))?;
        let text = relexicalize_lenient(&detokenize(&m.vocab.decode(&best.tokens)), &slot_map_from_da(&da));
        *out = c_string(text);
        Ok(())
    })
}

/// Samples `n` responses, best first, as a JSON array of
/// `{"text", "logprob"}` objects written to `*out_json`.
///
/// # Safety
/// Pointers must be valid; `history` must hold `history_len` C strings.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ctxgen_condlm_generate(
    model: *const CtxgenCondlm,
    history: *const *const c_char,
    history_len: usize,
    user: *const c_char,
    da: *const c_char,
    n: usize,
    top_k: usize,
    top_p: f64,
    seed: u64,
    out_json: *mut *mut c_char,
) -> CtxgenStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        *out = ptr::null_mut();
        let m = &handle(model, "model")?.0;
        let da: DialogueAct = str_arg(da, "da")?.parse()?;
        let d = build_dialogue(history, history_len, str_arg(user, "user")?, &da)?;
        let u = context_ids(&m.vocab, &d, d.turns.len() - 1, m.config.context)?;
        let opts = SampleOptions { n, top_k, top_p, ..Default::default() };
        let samples = generate(m, &u, &m.vocab.encode(&da.to_string()), &opts, seed)?;
        let items: Vec<serde_json::Value> = samples
            .iter()
            .map(|s| serde_json::json!({ "text": detokenize(&m.vocab.decode(&s.tokens)), "logprob": s.logprob }))
            .collect();
        *out = c_string(serde_json::to_string(&items).map_err(Error::from)?);
        Ok(())
    })
}

/// Scores `n` candidates against `user`. Writes the index of the first
/// best candidate to `*best` and, when `scores` is not null, the summed
/// head score of each candidate to `scores[0..n]`.
///
/// # Safety
/// `candidates` must hold `n` C strings; `scores` must be null or hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ctxgen_reranker_select(
    model: *const CtxgenReranker,
    user: *const c_char,
    candidates: *const *const c_char,
    n: usize,
    best: *mut usize,
    scores: *mut f64,
) -> CtxgenStatus {
    guard(|| {
        let best = out_ptr(best, "best")?;
        let m = &handle(model, "model")?.0;
        let user = str_arg(user, "user")?;
        if n > 0 && candidates.is_null() {
            return Err(Fail::Null("candidates"));
        }
        let texts = (0..n).map(|i| str_arg(*candidates.add(i), "candidate")).collect::<Result<Vec<_>, _>>()?;
        let (b, s) = m.rerank(user, &texts, false)?;
        *best = b;
        if !scores.is_null() {
            ptr::copy_nonoverlapping(s.as_ptr(), scores, n);
        }
        Ok(())
    })
}

/// Smoothed sentence BLEU-4 of `candidate` against one reference.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctxgen_bleu4(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> CtxgenStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ctxgen::metrics::bleu4(str_arg(candidate, "candidate")?, &[str_arg(reference, "reference")?]);
        Ok(())
    })
}

/// Meteor of `candidate` against `reference`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ctxgen_meteor(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> CtxgenStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ctxgen::metrics::meteor(str_arg(candidate, "candidate")?, str_arg(reference, "reference")?);
        Ok(())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ctxgen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
