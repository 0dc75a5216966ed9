use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use ctxgen::condlm::{CondContext, CondLm, CondLmConfig};
use ctxgen::corpus::{ContextSpec, DaInventory, Vocab};
use ctxgen::ctxencoder::{ContextEncoder, EncoderConfig};
use ctxgen::reranker::{Reranker, RerankerConfig};
use ctxgen::sclstm::{Sclstm, SclstmConfig};
use ctxgen_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cs(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ctxgen_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    encoder: CString,
    sclstm: CString,
    condlm: CString,
    reranker: CString,
}

fn fixture() -> Fixture {
    let words = "is there an entrance fee ? it 5 pounds to get in . goodbye";
    let vocab = Vocab::from_counts(&words.split(' ').map(|w| (w.to_string(), 1)).collect(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    let save = |ck: ctxgen::numkernel::Checkpoint, p: &Path| ck.save(p).unwrap();

    let enc = ContextEncoder::new(EncoderConfig { dim: 8, d_c: 6, heads: 2, ff: 16, max_len: 64 }, vocab.clone(), &mut rng).unwrap();
    save(enc.to_checkpoint().unwrap(), &path("enc"));
    let inv = DaInventory::from_keys(["attraction{inform(fee=*)}".to_string()]);
    let cfg = SclstmConfig { d_w: 8, d_g: 8, ..SclstmConfig::desk(Some(ContextSpec::new(1, 1)), 6) };
    let sc = Sclstm::new(cfg, vocab.clone(), inv, &mut rng).unwrap();
    save(sc.to_checkpoint().unwrap(), &path("sclstm"));
    let lm_cfg = CondLmConfig { dim: 8, heads: 2, ff: 16, layers: 1, max_len: 96, context: CondContext::Exchange };
    save(CondLm::new(lm_cfg, vocab.clone(), &mut rng).unwrap().to_checkpoint().unwrap(), &path("condlm"));
    let rr_cfg = RerankerConfig { dim: 8, heads: 2, ff: 16, layers: 1, max_len: 64 };
    save(Reranker::new(rr_cfg, vocab, &mut rng).unwrap().to_checkpoint().unwrap(), &path("rr"));

    let p = |n: &str| cs(path(n).to_str().unwrap());
    Fixture { encoder: p("enc"), sclstm: p("sclstm"), condlm: p("condlm"), reranker: p("rr"), _dir: dir }
}

#[test]
fn metrics_through_the_c_interface() {
    let (a, b) = (cs("it is 5 pounds to get in"), cs("it is 5 pounds to get in"));
    let mut v = 0.0;
    assert_eq!(unsafe { ctxgen_bleu4(a.as_ptr(), b.as_ptr(), &mut v) }, CtxgenStatus::Ok);
    assert_eq!(v, 1.0);
    assert_eq!(unsafe { ctxgen_meteor(a.as_ptr(), b.as_ptr(), &mut v) }, CtxgenStatus::Ok);
    assert!((v - (1.0 - 0.5 / 343.0)).abs() < 1e-12);
    assert_eq!(unsafe { ctxgen_bleu4(ptr::null(), b.as_ptr(), &mut v) }, CtxgenStatus::NullPointer);
    assert!(last_error().contains("candidate"));
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { ctxgen_bleu4(bad.as_ptr().cast(), b.as_ptr(), &mut v) }, CtxgenStatus::InvalidUtf8);
}

#[test]
fn load_generate_and_select() {
    let f = fixture();
    unsafe {
        let mut enc = ptr::null_mut();
        let mut sc = ptr::null_mut();
        let mut lm = ptr::null_mut();
        let mut rr = ptr::null_mut();
        assert_eq!(ctxgen_encoder_load(f.encoder.as_ptr(), &mut enc), CtxgenStatus::Ok);
        assert_eq!(ctxgen_sclstm_load(f.sclstm.as_ptr(), &mut sc), CtxgenStatus::Ok);
        assert_eq!(ctxgen_condlm_load(f.condlm.as_ptr(), &mut lm), CtxgenStatus::Ok);
        assert_eq!(ctxgen_reranker_load(f.reranker.as_ptr(), &mut rr), CtxgenStatus::Ok);

        let hist = [cs("is there a fee ?"), cs("it is 5 pounds .")];
        let hp: Vec<*const std::ffi::c_char> = hist.iter().map(|s| s.as_ptr()).collect();
        let user = cs("is there an entrance fee ?");
        let da = cs("attraction{inform(fee=5 pounds)}");
        let mut text = ptr::null_mut();
        let st = ctxgen_sclstm_generate(sc, enc, hp.as_ptr(), 2, user.as_ptr(), da.as_ptr(), 3, &mut text);
        assert_eq!(st, CtxgenStatus::Ok, "{}", last_error());
        assert!(!text.is_null());
        ctxgen_string_free(text);

        let st = ctxgen_sclstm_generate(sc, ptr::null(), ptr::null(), 0, user.as_ptr(), da.as_ptr(), 3, &mut text);
        assert_eq!(st, CtxgenStatus::NullPointer);
        assert!(text.is_null());
        let other = cs("hotel{inform(stars=4)}");
        let st = ctxgen_sclstm_generate(sc, enc, ptr::null(), 0, user.as_ptr(), other.as_ptr(), 3, &mut text);
        assert_eq!(st, CtxgenStatus::Data);
        assert!(last_error().contains("unknown dialogue act"));
        let junk = cs("not an act");
        let st = ctxgen_sclstm_generate(sc, enc, ptr::null(), 0, user.as_ptr(), junk.as_ptr(), 3, &mut text);
        assert_eq!(st, CtxgenStatus::Data);
        let st = ctxgen_sclstm_generate(sc, enc, ptr::null(), 0, user.as_ptr(), da.as_ptr(), 0, &mut text);
        assert_eq!(st, CtxgenStatus::Usage);

        let mut json = ptr::null_mut();
        let st = ctxgen_condlm_generate(lm, hp.as_ptr(), 2, user.as_ptr(), da.as_ptr(), 4, 5, 0.9, 7, &mut json);
        assert_eq!(st, CtxgenStatus::Ok, "{}", last_error());
        let parsed: Vec<serde_json::Value> = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        ctxgen_string_free(json);
        assert_eq!(parsed.len(), 4);
        let st = ctxgen_condlm_generate(lm, ptr::null(), 0, user.as_ptr(), da.as_ptr(), 4, 0, 0.9, 7, &mut json);
        assert_eq!(st, CtxgenStatus::Usage);

        let cands = [cs("it is 5 pounds ."), cs("goodbye ."), cs("it is 5 pounds .")];
        let cp: Vec<*const std::ffi::c_char> = cands.iter().map(|s| s.as_ptr()).collect();
        let mut best = usize::MAX;
        let mut scores = [0.0; 3];
        let st = ctxgen_reranker_select(rr, user.as_ptr(), cp.as_ptr(), 3, &mut best, scores.as_mut_ptr());
        assert_eq!(st, CtxgenStatus::Ok);
        assert!(best < 2);
        assert_eq!(scores[0], scores[2]);
        let st = ctxgen_reranker_select(rr, user.as_ptr(), cp.as_ptr(), 0, &mut best, ptr::null_mut());
        assert_eq!(st, CtxgenStatus::Usage);

        ctxgen_encoder_free(enc);
        ctxgen_sclstm_free(sc);
        ctxgen_condlm_free(lm);
        ctxgen_reranker_free(rr);
        ctxgen_sclstm_free(ptr::null_mut());
    }
}

#[test]
fn load_failures_leave_null_handles() {
    let f = fixture();
    let mut h = 1usize as *mut CtxgenSclstm;
    let missing = cs("/nonexistent/model.ckpt");
    assert_eq!(unsafe { ctxgen_sclstm_load(missing.as_ptr(), &mut h) }, CtxgenStatus::Data);
    assert!(h.is_null());
    // a checkpoint of another kind is rejected
    assert_eq!(unsafe { ctxgen_sclstm_load(f.condlm.as_ptr(), &mut h) }, CtxgenStatus::Data);
    assert!(last_error().contains("condlm"));
    assert_eq!(unsafe { ctxgen_sclstm_load(missing.as_ptr(), ptr::null_mut()) }, CtxgenStatus::NullPointer);
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ctxgen.h")).unwrap();
    for name in [
        "CtxgenStatus",
        "CTXGEN_STATUS_OK",
        "typedef struct CtxgenSclstm CtxgenSclstm",
        "ctxgen_last_error",
        "ctxgen_sclstm_generate",
        "ctxgen_condlm_generate",
        "ctxgen_reranker_select",
        "ctxgen_bleu4",
        "ctxgen_string_free",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(ctxgen_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
