use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::condlm::{build_prompt, context_ids, CondLm};
use crate::corpus::vocab::{EOS, RESERVED};
use crate::corpus::{detokenize, Dialogue};
use crate::gens::{Candidate, GenItem};
use crate::metrics::thread_pool;
use crate::seeds::stream_seed;
use crate::error::{Error, Result};
use crate::numkernel::linalg::{log_softmax, softmax_in_place};

/// Keeps the `k` most probable ids, then the shortest prefix of those
/// (by descending probability) whose original mass reaches `p`, and
/// renormalises. Ties are broken by lower id.
pub fn sample_filter(probs: &[f64], k: usize, p: f64) -> Result<Vec<f64>> {
    if k == 0 || !(p > 0.0 && p <= 1.0) {
        return Err(Error::Usage(format!("sample filter needs k >= 1 and p in (0, 1], got k={k}, p={p}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut cum = 0.0;
    for &i in order.iter().take(k) {
        keep.push(i);
        cum += probs[i];
        if cum >= p {
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &keep {
        out[i] = probs[i] / cum;
    }
    Ok(out)
}

/// Draws an index from a distribution with non-negative weights.
pub fn sample_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Result<usize> {
    let w = WeightedIndex::new(dist).map_err(|e| Error::Usage(format!("bad sampling weights: {e}")))?;
    Ok(w.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub n: usize,
    pub top_k: usize,
    pub top_p: f64,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// Ids never sampled.
    pub banned: Vec<usize>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            n: 5,
            top_k: 5,
            top_p: 0.9,
            max_len: 60,
            banned: (0..RESERVED.len()).filter(|&t| t != EOS).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Response ids, EOS excluded.
    pub tokens: Vec<usize>,
    /// Log-prob under the unfiltered model, EOS included when finished.
    pub logprob: f64,
    pub finished: bool,
}

impl Sample {
    pub fn score(&self) -> f64 {
        self.logprob / (self.tokens.len() + usize::from(self.finished)).max(1) as f64
    }
}

/// `n` independent samples for one prompt, best per-token log-prob first.
pub fn generate(model: &CondLm, u: &[usize], d: &[usize], opts: &SampleOptions, seed: u64) -> Result<Vec<Sample>> {
    if opts.n == 0 || opts.max_len == 0 {
        return Err(Error::Usage("n and max_len must be at least 1".into()));
    }
    let room = opts.max_len.min(model.config.max_len.saturating_sub(d.len() + 3));
    let prompt = build_prompt(u, d, model.config.max_len, room.max(1))?;
    let mut base = model.cache();
    let mut first = Vec::new();
    for &t in &prompt {
        first = base.push(t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(opts.n);
    for _ in 0..opts.n {
        let mut cache = base.clone();
        let mut logits = first.clone();
        let mut s = Sample { tokens: Vec::new(), logprob: 0.0, finished: false };
        for step in 0..room {
            let lp = log_softmax(&logits);
            let mut probs = logits.clone();
            for &b in &opts.banned {
                if b < probs.len() {
                    probs[b] = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(&mut probs);
            let dist = sample_filter(&probs, opts.top_k, opts.top_p)?;
            let t = sample_index(&dist, &mut rng)?;
            s.logprob += lp[t];
            if t == EOS {
                s.finished = true;
                break;
            }
            s.tokens.push(t);
            if step + 1 < room {
                logits = cache.push(t)?;
            }
        }
        out.push(s);
    }
    out.sort_by(|a, b| b.score().total_cmp(&a.score()));
    Ok(out)
}

/// Samples candidates for every annotated system turn. Each turn draws
/// from its own stream keyed by dialogue id and turn, so the output does
/// not depend on scheduling.
pub fn generate_dialogues(model: &CondLm, dialogues: &[Dialogue], opts: &SampleOptions, seed: u64) -> Result<Vec<GenItem>> {
    let jobs: Vec<(&Dialogue, usize)> = dialogues.iter().flat_map(|d| d.target_indices().map(move |i| (d, i))).collect();
    thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(d, i)| {
                let da = d.turns[i].da.as_ref().expect("target turns carry an act");
                let u = context_ids(&model.vocab, d, i, model.config.context)?;
                let dids = model.vocab.encode(&da.to_string());
                let samples = generate(model, &u, &dids, opts, stream_seed(seed, &format!("{}/{i}", d.id)))?;
                let candidates = samples
                    .iter()
                    .map(|s| {
                        let text = detokenize(&model.vocab.decode(&s.tokens));
                        Candidate { delex_text: text.clone(), text, logprob: s.logprob, score: None }
                    })
                    .collect();
                Ok(GenItem {
                    dialogue_id: d.id.clone(),
                    turn: i,
                    da: da.to_string(),
                    candidates,
                    user: Some(d.turns[i - 1].text.clone()),
                    model: Some(super::CHECKPOINT_KIND.into()),
                })
            })
            .collect()
    })
}
