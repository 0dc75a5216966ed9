use super::*;
use crate::corpus::vocab::{is_reserved, MASK};
use crate::corpus::{DialogueAct, Turn};
use crate::ctxencoder::{ContextEncoder, EncoderConfig};
use crate::gens::{Candidate, GenItem};
use crate::metrics::{bleu4, context_fit, embed_score, meteor};
use crate::numkernel::{grad_check_with, GradCheckOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: &str = "i need a hotel in the north . it is cheap yes sure bye thanks , which area ?";

fn vocab() -> Vocab {
    Vocab::from_counts(&WORDS.split(' ').map(|w| (w.to_string(), 1)).collect(), 1).unwrap()
}

fn encoder() -> ContextEncoder {
    let cfg = EncoderConfig { dim: 8, d_c: 6, heads: 2, ff: 16, max_len: 32 };
    ContextEncoder::new(cfg, vocab(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn tiny(seed: u64) -> Reranker {
    let cfg = RerankerConfig { dim: 8, heads: 2, ff: 16, layers: 1, max_len: 24 };
    Reranker::new(cfg, vocab(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn dialogue() -> Dialogue {
    let da = |s: &str| Some(s.parse::<DialogueAct>().unwrap());
    Dialogue {
        id: "d".into(),
        turns: vec![
            Turn::user("i need a hotel ."),
            Turn::system("which area ?", da("hotel{request(area=?)}")),
            Turn::user("the north ."),
            Turn::system("it is cheap .", da("hotel{inform(price=cheap)}")),
            Turn::user("thanks ."),
            Turn::system("bye .", da("general{bye()}")),
        ],
    }
}

fn item(turn: usize, texts: &[&str]) -> GenItem {
    GenItem {
        dialogue_id: "d".into(),
        turn,
        da: String::new(),
        candidates: texts
            .iter()
            .map(|t| Candidate { text: t.to_string(), delex_text: t.to_string(), logprob: 0.0, score: None })
            .collect(),
        user: None,
        model: None,
    }
}

#[test]
fn cleaning_rules() {
    let enc = encoder();
    let d = [dialogue()];
    let ex = clean_candidates(&d, &[item(1, &["yes .", "yes .", "sure ."])], &enc).unwrap();
    let rs: Vec<&str> = ex.iter().map(|e| e.r.as_str()).collect();
    assert_eq!(rs, ["yes .", "sure .", "which area ?"]);
    assert_eq!(ex.iter().filter(|e| e.is_gold).count(), 1);

    let last = clean_candidates(&d, &[item(5, &["a", "b", "c", "d", "e"])], &enc).unwrap();
    assert!(last.is_empty());

    let g = clean_candidates(&d, &[item(3, &["it is cheap .", "sure ."])], &enc).unwrap();
    let rs: Vec<(&str, bool)> = g.iter().map(|e| (e.r.as_str(), e.is_gold)).collect();
    assert_eq!(rs, [("sure .", false), ("it is cheap .", true)]);

    let mut bad = item(1, &["x"]);
    bad.dialogue_id = "zz".into();
    assert!(clean_candidates(&d, &[bad], &enc).is_err());
}

#[test]
fn targets_compose_the_metrics() {
    let enc = encoder();
    let (u, r, gold) = ("i need a hotel .", "it is in the north .", "the hotel is cheap .");
    let t = compute_targets(u, r, gold, &enc).unwrap();
    let e = embed_score(r, gold, &enc).unwrap();
    let want = [bleu4(r, &[gold]), meteor(r, gold), e.precision, e.recall, e.f1, context_fit(u, r, &enc).unwrap()];
    assert_eq!(t.0, want);
    assert_eq!(t, compute_targets(u, r, gold, &enc).unwrap());

    let s = compute_targets(u, gold, gold, &enc).unwrap();
    assert_eq!(s.0[0], 1.0);
    for k in 2..5 {
        assert!((s.0[k] - 1.0).abs() < 1e-12);
    }
    // identical text aligns as one chunk: 1 - 0.5 / m^3 with m = 5
    assert!((s.0[1] - (1.0 - 0.5 / 125.0)).abs() < 1e-12);
}

#[test]
fn mask_rate_is_fifteen_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<usize> = (0..10_000).map(|i| 10 + i % 7).collect();
    let (masked, targets) = mask_positions(&ids, 0.15, &mut rng);
    let n = targets.iter().filter(|t| t.is_some()).count();
    assert!((n as f64 / 1e4 - 0.15).abs() <= 0.01, "{n}");
    for ((m, t), o) in masked.iter().zip(&targets).zip(&ids) {
        match t {
            Some(x) => assert!(*m == MASK && x == o),
            None => assert_eq!(m, o),
        }
    }
    let (_, none) = mask_positions(&[1, 5, 6, 7], 1.0, &mut rng);
    assert!(none.iter().all(Option::is_none) && [1usize, 5, 6, 7].iter().all(|&t| is_reserved(t)));
}

#[test]
fn unmasked_positions_get_no_logit_gradient() {
    let m = tiny(2);
    let seq = m.input_ids("i need a hotel .", "which area ?");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ids, tg) = mask_positions(&seq, 0.5, &mut rng);
    let include: Vec<bool> = tg.iter().map(Option::is_some).collect();
    assert!(include.iter().any(|&x| x));
    let targets: Vec<usize> = tg.iter().map(|t| t.unwrap_or(0)).collect();
    let mut g = Graph::new();
    let logits = m.mlm_logits(&mut g, &m.params, &[ids]).unwrap();
    let loss = g.cross_entropy(logits, &targets, &include).unwrap();
    let grads = g.backward(loss).unwrap();
    let gl = grads.wrt(logits);
    for (r, inc) in include.iter().enumerate() {
        if !inc {
            assert!(gl.row(r).iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn heads_gradient_check() {
    let mut m = tiny(3);
    let seqs = vec![m.input_ids("i need a hotel", "sure ."), m.input_ids("thanks", "bye .")];
    let y = [0.1, 0.5, 0.2, 0.3, 0.9, -0.4, 1.0, 0.0, 0.7, 0.6, 0.2, 0.1];
    let probe = m.clone();
    let err = grad_check_with(
        |g, p| {
            let pred = probe.predict(g, p, &seqs)?;
            let l = g.mse(pred, &y)?;
            g.scale(l, 6.0)
        },
        &mut m.params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn rerank_basics() {
    let mut m = tiny(5);
    let (best, scores) = m.rerank("i need a hotel", &["sure ."], false).unwrap();
    assert_eq!((best, scores.len()), (0, 1));

    let cands = ["sure .", "it is cheap .", "which area ?", "bye ."];
    let (b0, s0) = m.rerank("i need a hotel", &cands, false).unwrap();
    let id = m.heads_bias_id();
    let shifted: Vec<f64> = m.params.tensor(id).data().iter().map(|x| x + 0.75).collect();
    *m.params.tensor_mut(id) = Tensor::from_vec(shifted);
    let (b1, s1) = m.rerank("i need a hotel", &cands, false).unwrap();
    assert_eq!(b0, b1);
    for (a, b) in s0.iter().zip(&s1) {
        assert!((b - a - 6.0 * 0.75).abs() < 1e-9);
    }
    assert!(m.rerank("x", &[], false).is_err());
    // ties resolve to the first occurrence
    let (t, _) = m.rerank("i need a hotel", &["sure .", "sure ."], false).unwrap();
    assert_eq!(t, 0);
}

#[test]
fn finetune_reduces_training_loss_and_checkpoints() {
    let m = tiny(6);
    let data: Vec<(Vec<usize>, Targets)> = ["sure .", "it is cheap .", "which area ?", "bye .", "yes , the north ."]
        .iter()
        .enumerate()
        .map(|(i, r)| (m.input_ids("i need a hotel", r), Targets([0.1 * i as f64; NUM_TARGETS])))
        .collect();
    let cfg = FinetuneConfig { batch_size: 2, max_epochs: 15, patience: 100, ..Default::default() };
    let (trained, log) = finetune_regression(m.clone(), &data, &data, &cfg, 0).unwrap();
    assert!(log.train_loss.last().unwrap() < &log.initial_train_loss);
    assert!(finetune_regression(m, &[], &[], &cfg, 0).is_err());
    let back = Reranker::from_checkpoint(Checkpoint::from_bytes(&trained.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
    assert!(back.params.bit_identical(&trained.params));
    assert_eq!(back.target_stats, trained.target_stats);
}
