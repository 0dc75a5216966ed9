use super::*;
use crate::numkernel::{grad_check_with, GradCheckOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn empty_vocab() -> Vocab {
    Vocab::from_counts(&Default::default(), 1).unwrap()
}

fn tiny(layers: usize, dim: usize, heads: usize, v: usize, seed: u64) -> CondLm {
    let cfg = CondLmConfig { dim, heads, ff: 2 * dim, layers, max_len: 24, context: CondContext::Utterance };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = CondLm::with_output_size(cfg, v, empty_vocab(), &mut rng).unwrap();
    // non-trivial layer-norm gains and biases
    let names: Vec<String> = m.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.contains("ln") || n.ends_with(".b")) {
        let t = m.params.get(n).unwrap().clone();
        let noisy = Tensor::randn(t.shape(), 0.2, &mut rng);
        let data: Vec<f64> = t.data().iter().zip(noisy.data()).map(|(a, b)| a + b).collect();
        m.params.set(n, Tensor::new(t.shape(), data).unwrap()).unwrap();
    }
    m
}

fn triplet(u: usize, d: usize, r: usize) -> Triplet {
    Triplet {
        dialogue_id: "x".into(),
        turn: 1,
        u: (0..u).map(|i| 10 + i).collect(),
        d: (0..d).map(|i| 20 + i).collect(),
        r: (0..r).map(|i| 30 + i).collect(),
    }
}

#[test]
fn sequence_layout() {
    let (ids, mask) = build_sequence(&triplet(3, 4, 5), 128).unwrap();
    assert_eq!(ids.len(), 15);
    assert_eq!(ids, vec![10, 11, 12, SEP_DA, 20, 21, 22, 23, SEP_RESP, 30, 31, 32, 33, 34, EOS]);
    assert_eq!(mask.len(), 14);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 6);
    assert!(mask[8..].iter().all(|&m| m) && !mask[7]);

    let (short, _) = build_sequence(&triplet(3, 4, 5), 14).unwrap();
    assert_eq!(short[..2], [11, 12]);
    assert!(build_sequence(&triplet(3, 4, 5), 11).is_err());
}

#[test]
fn sequence_round_trip_through_vocab() {
    let vocab = Vocab::from_counts(&["hi", "hotel", "{", "}", "yes"].map(|w| (w.to_string(), 1)).into_iter().collect(), 1).unwrap();
    let t = Triplet {
        dialogue_id: "x".into(),
        turn: 1,
        u: vocab.encode("hi"),
        d: vocab.encode("hotel { }"),
        r: vocab.encode("yes"),
    };
    let (ids, _) = build_sequence(&t, 32).unwrap();
    assert_eq!(vocab.decode(&ids).join(" "), "hi <sep_da> hotel { } <sep_resp> yes <eos>");
}

#[test]
fn later_tokens_never_change_earlier_logits() {
    let m = tiny(2, 8, 2, 12, 1);
    let a = vec![3, 5, 7, 9, 11, 2];
    let mut b = a.clone();
    b[4] = 1;
    b[5] = 6;
    let run = |ids: &Vec<usize>| {
        let mut g = Graph::no_grad();
        let l = m.forward(&mut g, &m.params, &[ids.clone()], None).unwrap();
        g.value(l).clone()
    };
    let (la, lb) = (run(&a), run(&b));
    for t in 0..4 {
        assert_eq!(la.row(t), lb.row(t));
    }
    assert_ne!(la.row(4), lb.row(4));
}

#[test]
fn attention_rows_sum_to_one() {
    let m = tiny(2, 8, 2, 12, 2);
    let mut g = Graph::no_grad();
    let mut trace = Vec::new();
    m.forward(&mut g, &m.params, &[vec![1, 2, 3, 4], vec![5, 6]], Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), 2 * 2 * 2);
    for v in trace {
        let t = g.value(v);
        let (rows, cols) = t.matrix_dims();
        for r in 0..rows {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.row(r)[r + 1..cols].iter().all(|&x| x == 0.0));
        }
    }
}

/// One-layer forward written with plain loops over the raw parameters.
fn loop_oracle(m: &CondLm, ids: &[usize]) -> Vec<Vec<f64>> {
    let p = &m.params;
    let get = |n: &str| p.get(n).unwrap().clone();
    let d = m.config.dim;
    let heads = m.config.heads;
    let dh = d / heads;
    let lin = |x: &[f64], name: &str| -> Vec<f64> {
        let w = get(&format!("{name}.w"));
        let b = p.get(&format!("{name}.b")).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; w.matrix_dims().1]);
        let (i, o) = w.matrix_dims();
        (0..o).map(|j| b[j] + (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>()).collect()
    };
    let ln = |x: &[f64], name: &str| -> Vec<f64> {
        let g = get(&format!("{name}.gain"));
        let b = get(&format!("{name}.bias"));
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        (0..x.len()).map(|i| (x[i] - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i]).collect()
    };
    let embed = get("embed");
    let pos = get("pos");
    let x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| embed.row(id)[j] + pos.row(t)[j]).collect())
        .collect();
    let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, "block0.ln1")).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| lin(r, "block0.q")).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|r| lin(r, "block0.k")).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|r| lin(r, "block0.v")).collect();
    let mut out = Vec::new();
    for t in 0..ids.len() {
        let mut att = vec![0.0; d];
        for hd in 0..heads {
            let s: Vec<f64> = (0..=t)
                .map(|j| (0..dh).map(|c| q[t][hd * dh + c] * k[j][hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..=t {
                let w = (s[j] - mx).exp() / z;
                for c in 0..dh {
                    att[hd * dh + c] += w * v[j][hd * dh + c];
                }
            }
        }
        let o = lin(&att, "block0.o");
        let x1: Vec<f64> = (0..d).map(|j| x[t][j] + o[j]).collect();
        let f = lin(&ln(&x1, "block0.ln2"), "block0.ff1");
        let f: Vec<f64> = f.iter().map(|&z| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh())).collect();
        let f = lin(&f, "block0.ff2");
        let x2: Vec<f64> = (0..d).map(|j| x1[j] + f[j]).collect();
        out.push(lin(&ln(&x2, "ln_f"), "out"));
    }
    out
}

#[test]
fn one_layer_forward_matches_loop_oracle() {
    let m = tiny(1, 8, 2, 10, 3);
    let ids = vec![1, 4, 9, 2, 7, 7, 0];
    let mut g = Graph::no_grad();
    let l = m.forward(&mut g, &m.params, &[ids.clone()], None).unwrap();
    let oracle = loop_oracle(&m, &ids);
    for (t, row) in oracle.iter().enumerate() {
        for (a, b) in g.value(l).row(t).iter().zip(row) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn kv_cache_matches_graph_forward() {
    let m = tiny(2, 8, 2, 12, 4);
    let ids = vec![3, 1, 4, 1, 5, 9, 2, 6];
    let mut g = Graph::no_grad();
    let l = m.forward(&mut g, &m.params, &[ids.clone()], None).unwrap();
    let mut cache = m.cache();
    for (t, &id) in ids.iter().enumerate() {
        let row = cache.push(id).unwrap();
        for (a, b) in g.value(l).row(t).iter().zip(&row) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn gradients_through_a_full_model() {
    let mut m = tiny(1, 4, 2, 7, 5);
    let seqs = vec![vec![1, 2, 3, 4], vec![5, 6, 0]];
    let targets = [2, 3, 4, 5, 6, 0, 1];
    let include = [true, false, true, true, true, false, true];
    let probe = m.clone();
    let err = grad_check_with(
        |g, p| {
            let l = probe.forward(g, p, &seqs, None)?;
            g.cross_entropy(l, &targets, &include)
        },
        &mut m.params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn masked_targets_do_not_affect_the_loss() {
    let m = tiny(1, 8, 2, 40, 6);
    let (ids, mask) = build_sequence(&triplet(3, 2, 3), 24).unwrap();
    let input = vec![ids[..ids.len() - 1].to_vec()];
    let mut targets = ids[1..].to_vec();
    let loss = |targets: &[usize]| {
        let mut g = Graph::no_grad();
        let l = m.forward(&mut g, &m.params, &input, None).unwrap();
        let c = g.cross_entropy(l, targets, &mask).unwrap();
        g.value(c).item()
    };
    let before = loss(&targets);
    for (t, &m) in targets.iter_mut().zip(&mask) {
        if !m {
            *t = 39;
        }
    }
    assert_eq!(before, loss(&targets));
}

#[test]
fn filter_hand_example() {
    let f = sample_filter(&[0.5, 0.3, 0.1, 0.05, 0.03, 0.02], 5, 0.9).unwrap();
    let want = [5.0 / 9.0, 3.0 / 9.0, 1.0 / 9.0, 0.0, 0.0, 0.0];
    for (a, b) in f.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(sample_filter(&[0.0, 1.0, 0.0], 5, 0.9).unwrap(), vec![0.0, 1.0, 0.0]);
    assert_eq!(sample_filter(&[0.2, 0.5, 0.3], 1, 1.0).unwrap(), vec![0.0, 1.0, 0.0]);
    assert!(matches!(sample_filter(&[1.0], 0, 0.9), Err(Error::Usage(_))));
    assert!(matches!(sample_filter(&[1.0], 1, 0.0), Err(Error::Usage(_))));
}

proptest! {
    #[test]
    fn filter_is_normalised_within_top_k(
        w in prop::collection::vec(0.01f64..1.0, 1..12),
        k in 1usize..8,
        p in 0.05f64..1.0,
    ) {
        let z: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
        let f = sample_filter(&probs, k, p).unwrap();
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut sorted = probs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let kth = sorted[k.min(sorted.len()) - 1];
        for (fi, pi) in f.iter().zip(&probs) {
            if *fi > 0.0 {
                prop_assert!(*pi >= kth);
            }
        }
    }
}

#[test]
fn sampling_frequencies_match_the_filter() {
    let probs = [0.35, 0.25, 0.15, 0.1, 0.08, 0.04, 0.03];
    let f = sample_filter(&probs, 5, 0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..n {
        counts[sample_index(&f, &mut rng).unwrap()] += 1;
    }
    for (c, q) in counts.iter().zip(&f) {
        let sd = (n as f64 * q * (1.0 - q)).sqrt();
        assert!((*c as f64 - n as f64 * q).abs() <= 3.0 * sd.max(1e-9), "{c} vs {}", n as f64 * q);
    }
}

#[test]
fn generation_is_seeded_and_greedy_at_k1() {
    let m = tiny(2, 8, 2, 16, 7);
    let opts = SampleOptions { n: 5, top_k: 5, top_p: 0.9, max_len: 8, banned: vec![0, 1] };
    let a = generate(&m, &[10, 11], &[12, 13], &opts, 3).unwrap();
    assert_eq!(a, generate(&m, &[10, 11], &[12, 13], &opts, 3).unwrap());
    assert_eq!(a.len(), 5);
    let greedy = SampleOptions { top_k: 1, ..opts };
    let g = generate(&m, &[10, 11], &[12, 13], &greedy, 9).unwrap();
    assert!(g.iter().all(|s| s.tokens == g[0].tokens));
}

#[test]
fn stepwise_logprob_equals_forward_logprob() {
    for seed in 0..5 {
        let m = tiny(2, 8, 2, 16, 20 + seed);
        let opts = SampleOptions { n: 1, top_k: 1, top_p: 1.0, max_len: 6, banned: vec![0, 1] };
        let s = &generate(&m, &[10, 11], &[12], &opts, 0).unwrap()[0];
        let mut ids = build_prompt(&[10, 11], &[12], m.config.max_len, 6).unwrap();
        let from = ids.len();
        ids.extend(&s.tokens);
        if s.finished {
            ids.push(EOS);
        }
        let full = m.sequence_logprob(&ids, from).unwrap();
        assert!((full - s.logprob).abs() < 1e-10);
    }
}

#[test]
fn zero_weight_model_samples_its_output_bias() {
    let mut m = tiny(1, 4, 2, 6, 8);
    let names: Vec<String> = m.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names {
        let t = m.params.get(&n).unwrap().clone();
        m.params.set(&n, Tensor::zeros(t.shape())).unwrap();
    }
    let probs = [0.05, 0.05, 0.4, 0.3, 0.15, 0.05];
    m.params.set("out.b", Tensor::from_vec(probs.iter().map(|p: &f64| p.ln()).collect())).unwrap();
    let mut cache = m.cache();
    let mut logits = cache.push(3).unwrap();
    softmax_in_place(&mut logits);
    for (a, b) in logits.iter().zip(probs) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let m = tiny(1, 8, 2, 40, 9);
    let data: Vec<Triplet> = (0..12).map(|i| triplet(2 + i % 3, 2, 3 + i % 2)).collect();
    let cfg = CondTrainConfig { batch_size: 4, max_epochs: 6, patience: 10, ..Default::default() };
    let (_, a) = train(m.clone(), &data, &data, &cfg, 1).unwrap();
    let (_, b) = train(m.clone(), &data, &data, &cfg, 1).unwrap();
    assert_eq!(a.dev_loss, b.dev_loss);
    assert!(a.dev_loss.last().unwrap() < &a.initial_dev_loss);
    assert!(matches!(train(m, &[], &[], &cfg, 1), Err(Error::Data(_))));
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny(1, 8, 2, 10, 10);
    let back = CondLm::from_checkpoint(Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
    assert!(back.params.bit_identical(&m.params));
    assert_eq!(back.config, m.config);
}

