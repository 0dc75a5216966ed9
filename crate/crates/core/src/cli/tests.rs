use super::*;
use crate::corpus::Vocab;

fn tiny_models() -> DemoModels {
    let words = "is there an entrance fee for ballare ? it 5 pounds to get in . goodbye";
    let vocab = Vocab::from_counts(&words.split(' ').map(|w| (w.to_string(), 1)).collect(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc_cfg = EncoderConfig { dim: 8, d_c: 6, heads: 2, ff: 16, max_len: 64 };
    let encoder = ContextEncoder::new(enc_cfg, vocab.clone(), &mut rng).unwrap();
    let inventory = crate::corpus::DaInventory::from_keys(["attraction{inform(fee=*)}".to_string()]);
    let small = |ctx| SclstmConfig { d_w: 8, d_g: 8, ..SclstmConfig::desk(ctx, 6) };
    let spec = Some(ContextSpec::new(0, 0));
    DemoModels {
        sclstm: Sclstm::new(small(spec), vocab.clone(), inventory.clone(), &mut rng).unwrap(),
        baseline: Some(Sclstm::new(small(None), vocab.clone(), inventory, &mut rng).unwrap()),
        condlm: CondLm::new(
            CondLmConfig { dim: 8, heads: 2, ff: 16, layers: 1, max_len: 96, context: CondContext::Utterance },
            vocab.clone(),
            &mut rng,
        )
        .unwrap(),
        reranker: Reranker::new(RerankerConfig { dim: 8, heads: 2, ff: 16, layers: 1, max_len: 96 }, vocab, &mut rng).unwrap(),
        encoder,
    }
}

fn run_script(models: &DemoModels, script: &str) -> String {
    let mut out = Vec::new();
    run_demo(models, &mut script.as_bytes(), &mut out, 1).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn demo_prints_one_response_per_model() {
    let m = tiny_models();
    let out = run_script(&m, "Is there an entrance fee for Ballare?\nattraction{inform(fee=5 pounds)}\n:quit\n");
    for label in ["baseline   :", "contextual :", "condlm     :", "reranked   :"] {
        assert_eq!(out.matches(label).count(), 1, "{out}");
    }
    assert!(!out.contains("  contextual : ("), "{out}");
}

#[test]
fn demo_context_command_is_echoed_in_the_prompt() {
    let m = tiny_models();
    let out = run_script(&m, ":context 0u0s\n:context 5u5s\n:context bogus\n");
    assert!(out.contains("[0u0s] user> "));
    assert!(out.contains("sclstm context set to 5u5s\n[5u5s] user> "));
    assert!(out.contains("invalid context spec"));
}

#[test]
fn demo_reprompts_on_a_bad_act() {
    let m = tiny_models();
    let out = run_script(&m, "hello\nnot an act\nattraction{inform(fee=2 pounds)}\n");
    assert_eq!(out.matches("act> ").count(), 2);
    assert!(out.contains("reranked   :"));
}

#[test]
fn session_reset_empties_the_window() {
    let m = tiny_models();
    let mut s = DemoSession::new(&m, 1);
    let da: crate::corpus::DialogueAct = "attraction{inform(fee=5 pounds)}".parse().unwrap();
    s.set_context(ContextSpec::new(5, 5));
    assert_eq!(s.respond("is there a fee ?", &da).context_turns, 0);
    assert_eq!(s.respond("for ballare ?", &da).context_turns, 2);
    assert_eq!(s.history().len(), 4);
    s.reset();
    assert!(s.history().is_empty());
    assert_eq!(s.respond("is there a fee ?", &da).context_turns, 0);
}

#[test]
fn exit_codes() {
    assert_eq!(main_with_args(["ctxgen", "no-such-command"]), 1);
    assert_eq!(main_with_args(["ctxgen", "--help"]), 0);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let code = main_with_args(["ctxgen", "eval", "--gens", missing.to_str().unwrap(), "--data", missing.to_str().unwrap(), "--encoder", "x", "--out", "y"]);
    assert_eq!(code, 2);
    let code = main_with_args(["ctxgen", "data", "prepare", "--in", "x", "--format", "csv", "--out", "y"]);
    assert_eq!(code, 1);
}

#[test]
fn run_config_defaults_round_trip() {
    let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "out_dir": "r"}"#).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.sclstm_context, ContextSpec::new(5, 5));
    let echo: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(echo, cfg);
    assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 4}"#).is_err());
}
