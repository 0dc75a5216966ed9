use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::numkernel::linalg::log_softmax;
use crate::numkernel::{Graph, Tensor};
use crate::sclstm::{Sclstm, State};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub bos: usize,
    pub eos: usize,
    /// Ids never emitted.
    pub banned: Vec<usize>,
    /// Rank finished hypotheses by log-prob per token instead of raw log-prob.
    pub length_norm: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 10,
            max_len: 60,
            bos: BOS,
            eos: EOS,
            banned: (0..RESERVED.len()).filter(|&t| t != EOS).collect(),
            length_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, EOS excluded.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    /// Final reading-gate vector.
    pub d: Vec<f64>,
}

impl Hypothesis {
    /// Tokens scored so far, counting EOS when finished.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.logprob / self.scored_len().max(1) as f64
        } else {
            self.logprob
        }
    }
}

fn check(opts: &DecodeOptions) -> Result<()> {
    if opts.beam == 0 {
        return Err(Error::Usage("beam size must be at least 1".into()));
    }
    if opts.max_len == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    Ok(())
}

fn start(model: &Sclstm, g: &mut Graph, da_index: usize, ctx: Option<&[f64]>) -> Result<State> {
    let ctx = match ctx {
        Some(c) => Some(g.constant(Tensor::new(&[1, c.len()], c.to_vec())?)),
        None => None,
    };
    model.init_state(g, &model.params, ctx, &[da_index])
}

/// Keeps only the listed rows of a state, in order.
fn gather(g: &mut Graph, s: State, rows: &[usize]) -> Result<State> {
    Ok(State {
        h: g.embedding(s.h, rows)?,
        c: g.embedding(s.c, rows)?,
        d: g.embedding(s.d, rows)?,
    })
}

/// Beam search from BOS. Returns up to `beam` hypotheses, best first:
/// finished ones, then unfinished ones if fewer than `beam` finished.
pub fn beam_decode(
    model: &Sclstm,
    da_index: usize,
    ctx: Option<&[f64]>,
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    check(opts)?;
    let v = model.output_size();
    let k = model.num_acts();
    let mut banned = vec![false; v];
    for &t in &opts.banned {
        if t < v && t != opts.eos {
            banned[t] = true;
        }
    }
    let mut g = Graph::no_grad();
    let mut state = start(model, &mut g, da_index, ctx)?;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut last_d = g.value(state.d).data().to_vec();

    for _ in 0..opts.max_len {
        if live.is_empty() {
            break;
        }
        let inputs: Vec<usize> = live.iter().map(|(t, _)| t.last().copied().unwrap_or(opts.bos)).collect();
        let (next, logits) = model.step(&mut g, &model.params, &inputs, state)?;
        let logits = g.value(logits).clone();
        let d_all = g.value(next.d).clone();

        let mut ext: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (r, (_, lp)) in live.iter().enumerate() {
            let ls = log_softmax(logits.row(r));
            for (t, l) in ls.into_iter().enumerate() {
                if !banned[t] {
                    ext.push((lp + l, r, t));
                }
            }
        }
        ext.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        ext.truncate(opts.beam);

        let mut keep_rows = Vec::new();
        let mut new_live = Vec::new();
        for (lp, r, t) in ext {
            if t == opts.eos {
                done.push(Hypothesis {
                    tokens: live[r].0.clone(),
                    logprob: lp,
                    finished: true,
                    d: d_all.row(r).to_vec(),
                });
            } else {
                let mut toks = live[r].0.clone();
                toks.push(t);
                keep_rows.push(r);
                new_live.push((toks, lp));
            }
        }
        live = new_live;
        if live.is_empty() {
            break;
        }
        state = gather(&mut g, next, &keep_rows)?;
        last_d = g.value(state.d).data().to_vec();
    }

    let by_score = |a: &Hypothesis, b: &Hypothesis| {
        b.score(opts.length_norm).total_cmp(&a.score(opts.length_norm))
    };
    done.sort_by(by_score);
    done.truncate(opts.beam);
    if done.len() < opts.beam {
        let mut rest: Vec<Hypothesis> = live
            .into_iter()
            .enumerate()
            .map(|(r, (tokens, logprob))| Hypothesis {
                tokens,
                logprob,
                finished: false,
                d: last_d[r * k..(r + 1) * k].to_vec(),
            })
            .collect();
        rest.sort_by(by_score);
        rest.truncate(opts.beam - done.len());
        done.extend(rest);
    }
    Ok(done)
}

/// Argmax decoding, one token at a time.
pub fn greedy_decode(
    model: &Sclstm,
    da_index: usize,
    ctx: Option<&[f64]>,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    check(opts)?;
    let mut g = Graph::no_grad();
    let mut state = start(model, &mut g, da_index, ctx)?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut input = opts.bos;
    for _ in 0..opts.max_len {
        let (next, logits) = model.step(&mut g, &model.params, &[input], state)?;
        state = next;
        let ls = log_softmax(g.value(logits).data());
        let mut best: Option<(usize, f64)> = None;
        for (t, &l) in ls.iter().enumerate() {
            if t != opts.eos && opts.banned.contains(&t) {
                continue;
            }
            if best.map_or(true, |(_, b)| l > b) {
                best = Some((t, l));
            }
        }
        let (t, l) = best.ok_or_else(|| Error::Usage("every token is banned".into()))?;
        logprob += l;
        if t == opts.eos {
            return Ok(Hypothesis { tokens, logprob, finished: true, d: g.value(state.d).data().to_vec() });
        }
        tokens.push(t);
        input = t;
    }
    Ok(Hypothesis { tokens, logprob, finished: false, d: g.value(state.d).data().to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::sclstm::SclstmConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: usize = 8;

    fn small_model(seed: u64, contextual: bool) -> Sclstm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SclstmConfig {
            d_w: 4,
            d_g: 5,
            d_c: contextual.then_some(3),
            alpha: 1.0,
            context: None,
        };
        let vocab = Vocab::from_counts(&Default::default(), 1).unwrap();
        let mut m = Sclstm::synthetic(cfg, vocab, V, 3, &mut rng).unwrap();
        // Sharper output distribution so rankings are not all near-ties.
        let w = m.params.get("w_out").unwrap().clone();
        let scaled: Vec<f64> = w.data().iter().map(|x| x * 3.0).collect();
        m.params.set("w_out", Tensor::new(w.shape(), scaled).unwrap()).unwrap();
        m
    }

    fn opts(beam: usize, max_len: usize) -> DecodeOptions {
        DecodeOptions { beam, max_len, banned: vec![0, 1], ..Default::default() }
    }

    /// Log-prob of a full sequence (EOS appended when `finished`), one
    /// fresh forward per prefix.
    fn sequence_logprob(m: &Sclstm, da: usize, ctx: Option<&[f64]>, seq: &[usize]) -> f64 {
        let mut g = Graph::no_grad();
        let mut s = start(m, &mut g, da, ctx).unwrap();
        let mut input = BOS;
        let mut total = 0.0;
        for &t in seq {
            let (n, l) = m.step(&mut g, &m.params, &[input], s).unwrap();
            s = n;
            total += log_softmax(g.value(l).data())[t];
            input = t;
        }
        total
    }

    fn exhaustive_best(m: &Sclstm, da: usize, ctx: Option<&[f64]>, max_len: usize) -> (Vec<usize>, f64) {
        let free: Vec<usize> = (3..V).collect();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut prefixes: Vec<Vec<usize>> = vec![Vec::new()];
        for len in 0..max_len {
            for p in &prefixes {
                let mut seq = p.clone();
                seq.push(EOS);
                let score = sequence_logprob(m, da, ctx, &seq) / (len + 1) as f64;
                if score > best.1 {
                    best = (p.clone(), score);
                }
            }
            prefixes = prefixes
                .iter()
                .flat_map(|p| free.iter().map(move |&t| [p.as_slice(), &[t]].concat()))
                .collect();
        }
        best
    }

    #[test]
    fn full_width_beam_matches_exhaustive_argmax() {
        for seed in 0..50u64 {
            let m = small_model(seed, seed % 2 == 0);
            let ctx = (seed % 2 == 0).then(|| vec![0.6, 0.0, -0.8]);
            let max_len = 1 + (seed as usize % 5);
            let da = seed as usize % 3;
            let hyps = beam_decode(&m, da, ctx.as_deref(), &opts(V.pow(max_len as u32), max_len)).unwrap();
            let (seq, score) = exhaustive_best(&m, da, ctx.as_deref(), max_len);
            assert!(hyps[0].finished);
            assert_eq!(hyps[0].tokens, seq, "seed {seed}");
            assert!((hyps[0].score(true) - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..20u64 {
            let m = small_model(seed, false);
            let o = opts(1, 6);
            let b = beam_decode(&m, 1, None, &o).unwrap();
            let gr = greedy_decode(&m, 1, None, &o).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, gr.tokens);
            assert_eq!(b[0].finished, gr.finished);
            assert!((b[0].logprob - gr.logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_is_sum_of_steps_and_decode_is_deterministic() {
        let m = small_model(4, true);
        let ctx = [0.0, 1.0, 0.0];
        let o = opts(4, 5);
        let a = beam_decode(&m, 2, Some(&ctx), &o).unwrap();
        assert_eq!(a, beam_decode(&m, 2, Some(&ctx), &o).unwrap());
        assert!(a.len() <= 4);
        for h in &a {
            let mut seq = h.tokens.clone();
            if h.finished {
                seq.push(EOS);
            }
            assert!((sequence_logprob(&m, 2, Some(&ctx), &seq) - h.logprob).abs() < 1e-10);
            assert!(h.tokens.iter().all(|&t| t > 2));
        }
    }

    #[test]
    fn zero_lengths_are_usage_errors() {
        let m = small_model(0, false);
        assert!(matches!(beam_decode(&m, 0, None, &opts(0, 3)), Err(Error::Usage(_))));
        assert!(matches!(beam_decode(&m, 0, None, &opts(2, 0)), Err(Error::Usage(_))));
    }

    #[test]
    fn short_pool_is_padded_with_unfinished() {
        let mut m = small_model(1, false);
        let mut b = vec![0.0; V];
        b[EOS] = -50.0;
        m.params.set("b_out", Tensor::from_vec(b)).unwrap();
        let hyps = beam_decode(&m, 0, None, &opts(3, 2)).unwrap();
        assert_eq!(hyps.len(), 3);
        assert!(hyps.iter().all(|h| !h.finished && h.tokens.len() == 2));
    }
}
