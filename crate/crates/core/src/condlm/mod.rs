//! Causal transformer LM over `u [sep_da] d [sep_resp] r [eos]`, trained
//! on the response positions only and decoded by filtered sampling.

mod sample;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{EOS, PAD, SEP_DA, SEP_RESP, SYS, USR};
use crate::corpus::{tokenize, Dialogue, Speaker, Vocab};
use crate::error::{Error, Result};
use crate::nn::{segments_for, Block, LayerNorm, Linear};
use crate::numkernel::linalg::{dot, gelu, softmax_in_place};
use crate::numkernel::{Checkpoint, CheckpointHeader, Graph, ParamId, ParamStore, Tensor, Var};

pub use sample::{generate, generate_dialogues, sample_filter, sample_index, Sample, SampleOptions};
pub use train::{mean_loss, token_accuracy, train, CondTrainConfig, CondTrainLog};

pub const CHECKPOINT_KIND: &str = "condlm";

/// How much dialogue history goes into `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondContext {
    /// No history: `u` is a single PAD.
    #[serde(rename = "none")]
    None,
    /// The immediately preceding user utterance.
    #[serde(rename = "0u0s")]
    Utterance,
    /// One more user/system exchange before it.
    #[serde(rename = "1u1s")]
    Exchange,
}

impl std::str::FromStr for CondContext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "0u0s" => Ok(Self::Utterance),
            "1u1s" => Ok(Self::Exchange),
            _ => Err(Error::Usage(format!("context must be none, 0u0s or 1u1s, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondLmConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub max_len: usize,
    pub context: CondContext,
}

impl CondLmConfig {
    pub fn desk(context: CondContext) -> Self {
        Self { dim: 64, heads: 2, ff: 128, layers: 2, max_len: 128, context }
    }

    pub fn paper(context: CondContext) -> Self {
        Self { dim: 256, heads: 4, ff: 1024, layers: 4, max_len: 192, ..Self::desk(context) }
    }
}

/// Token ids of one training or prompting example. `r` excludes EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub dialogue_id: String,
    pub turn: usize,
    pub u: Vec<usize>,
    pub d: Vec<usize>,
    pub r: Vec<usize>,
}

/// `u SEP_DA d SEP_RESP r EOS` and a mask over the `len - 1` next-token
/// predictions, true where the predicted token belongs to `r` or is EOS.
/// Over-long sequences lose tokens from the left of `u`; at least one
/// token of `u` is kept.
pub fn build_sequence(t: &Triplet, max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if t.u.is_empty() || t.d.is_empty() {
        return Err(Error::Data(format!("{} turn {}: empty u or d", t.dialogue_id, t.turn)));
    }
    let fixed = t.d.len() + t.r.len() + 3;
    if fixed + 1 > max_len {
        return Err(Error::Data(format!(
            "{} turn {}: act and response need {} positions, limit {max_len}",
            t.dialogue_id,
            t.turn,
            fixed + 1
        )));
    }
    let keep = t.u.len().min(max_len - fixed);
    let mut ids = t.u[t.u.len() - keep..].to_vec();
    ids.push(SEP_DA);
    ids.extend_from_slice(&t.d);
    ids.push(SEP_RESP);
    let start = ids.len();
    ids.extend_from_slice(&t.r);
    ids.push(EOS);
    let mask = (1..ids.len()).map(|i| i >= start).collect();
    Ok((ids, mask))
}

/// The prompt part `u SEP_DA d SEP_RESP`, truncated like `build_sequence`
/// so that `room` response positions remain.
pub fn build_prompt(u: &[usize], d: &[usize], max_len: usize, room: usize) -> Result<Vec<usize>> {
    let fixed = d.len() + 2 + room;
    if u.is_empty() || fixed + 1 > max_len {
        return Err(Error::Data("prompt does not fit the position limit".into()));
    }
    let keep = u.len().min(max_len - fixed);
    let mut ids = u[u.len() - keep..].to_vec();
    ids.push(SEP_DA);
    ids.extend_from_slice(d);
    ids.push(SEP_RESP);
    Ok(ids)
}

/// `u` ids for a system turn under a context setting.
pub fn context_ids(vocab: &Vocab, d: &Dialogue, index: usize, ctx: CondContext) -> Result<Vec<usize>> {
    let enc = |text: &str| tokenize(text).iter().map(|w| vocab.id(w)).collect::<Vec<_>>();
    if index == 0 || index >= d.turns.len() || d.turns[index].speaker != Speaker::System {
        return Err(Error::Usage(format!("turn {index} of {} is not a system turn", d.id)));
    }
    Ok(match ctx {
        CondContext::None => vec![PAD],
        CondContext::Utterance => enc(&d.turns[index - 1].text),
        CondContext::Exchange => {
            let mut ids = Vec::new();
            for t in &d.turns[index.saturating_sub(3)..index] {
                ids.push(match t.speaker {
                    Speaker::User => USR,
                    Speaker::System => SYS,
                });
                ids.extend(enc(&t.text));
            }
            ids
        }
    })
}

/// One triplet per annotated system turn; `r` is the lexical response.
pub fn triplets(vocab: &Vocab, dialogues: &[Dialogue], ctx: CondContext) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for d in dialogues {
        for i in d.target_indices() {
            let t = &d.turns[i];
            let da = t.da.as_ref().expect("target turns carry an act").to_string();
            out.push(Triplet {
                dialogue_id: d.id.clone(),
                turn: i,
                u: context_ids(vocab, d, i, ctx)?,
                d: vocab.encode(&da),
                r: vocab.encode(&t.text),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Parts {
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
}

impl Parts {
    fn bind(p: &ParamStore, cfg: &CondLmConfig) -> Result<Self> {
        Ok(Self {
            embed: p.id("embed")?,
            pos: p.id("pos")?,
            blocks: (0..cfg.layers)
                .map(|l| Block::bind(p, &format!("block{l}"), cfg.heads))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::bind(p, "ln_f")?,
            out: Linear::bind(p, "out")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CondLm {
    pub config: CondLmConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    parts: Parts,
}

impl CondLm {
    pub fn new<R: Rng + ?Sized>(config: CondLmConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        Self::with_output_size(config, vocab.len(), vocab, rng)
    }

    /// Model over `v` ids regardless of the vocabulary, for synthetic tests.
    pub fn with_output_size<R: Rng + ?Sized>(config: CondLmConfig, v: usize, vocab: Vocab, rng: &mut R) -> Result<Self> {
        if config.dim % config.heads != 0 {
            return Err(Error::Config("model dim must be divisible by heads".into()));
        }
        let mut p = ParamStore::new();
        p.add("embed", Tensor::randn(&[v, config.dim], 0.1, rng))?;
        p.add("pos", Tensor::randn(&[config.max_len, config.dim], 0.1, rng))?;
        for l in 0..config.layers {
            Block::init(&mut p, &format!("block{l}"), config.dim, config.heads, config.ff, rng)?;
        }
        LayerNorm::init(&mut p, "ln_f", config.dim)?;
        Linear::init(&mut p, "out", config.dim, v, true, rng)?;
        let parts = Parts::bind(&p, &config)?;
        Ok(Self { config, vocab, params: p, parts })
    }

    pub fn output_size(&self) -> usize {
        self.parts.out.outputs
    }

    /// Logits `[N×V]` for packed sequences, each attending causally within
    /// itself. Attention matrices are pushed to `trace` when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[Vec<usize>],
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.is_empty() || s.len() > self.config.max_len {
                return Err(Error::shape("condlm forward", format!("sequence length {}", s.len())));
            }
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
        }
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let segments = segments_for(&lengths);
        let table = g.param(store, self.parts.embed);
        let ptable = g.param(store, self.parts.pos);
        let te = g.embedding(table, &ids)?;
        let pe = g.embedding(ptable, &pos)?;
        let mut x = g.add(te, pe)?;
        for b in &self.parts.blocks {
            x = b.forward(g, store, x, &segments, true, trace.as_deref_mut())?;
        }
        let x = self.parts.ln_f.forward(g, store, x)?;
        self.parts.out.forward(g, store, x)
    }

    /// Log-prob of `ids[from..]` given the prefix, by one graph forward.
    pub fn sequence_logprob(&self, ids: &[usize], from: usize) -> Result<f64> {
        let mut g = Graph::no_grad();
        let logits = self.forward(&mut g, &self.params, &[ids[..ids.len() - 1].to_vec()], None)?;
        let l = g.value(logits);
        let mut total = 0.0;
        for t in from.max(1)..ids.len() {
            total += crate::numkernel::linalg::log_softmax(l.row(t - 1))[ids[t]];
        }
        Ok(total)
    }

    pub fn cache(&self) -> KvCache<'_> {
        KvCache {
            model: self,
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            len: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                vocab_hash: self.vocab.hash(),
                config: serde_json::to_value(&self.config)?,
                extra: serde_json::json!({ "vocab": self.vocab }),
            },
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: CondLmConfig = serde_json::from_value(ck.header.config)?;
        let vocab: Vocab = serde_json::from_value(ck.header.extra["vocab"].clone())?;
        if vocab.hash() != ck.header.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let parts = Parts::bind(&ck.params, &config)?;
        Ok(Self { config, vocab, params: ck.params, parts })
    }
}

/// Incremental decoding state holding per-layer keys and values.
#[derive(Clone, Debug)]
pub struct KvCache<'a> {
    model: &'a CondLm,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl KvCache<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let m = self.model;
        let p = &m.params;
        if self.len >= m.config.max_len {
            return Err(Error::shape("condlm cache", format!("position {} past limit", self.len)));
        }
        let dim = m.config.dim;
        let heads = m.config.heads;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let e = p.tensor(m.parts.embed).row(token);
        let pe = p.tensor(m.parts.pos).row(self.len);
        let mut x: Vec<f64> = e.iter().zip(pe).map(|(a, b)| a + b).collect();
        for (l, b) in m.parts.blocks.iter().enumerate() {
            let h = b.ln1.apply(p, &x);
            let q = b.q.apply(p, &h);
            self.keys[l].push(b.k.apply(p, &h));
            self.values[l].push(b.v.apply(p, &h));
            let mut att = vec![0.0; dim];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let mut w: Vec<f64> = self.keys[l].iter().map(|k| dot(&q[r.clone()], &k[r.clone()]) * scale).collect();
                softmax_in_place(&mut w);
                for (wj, v) in w.iter().zip(&self.values[l]) {
                    for (a, vv) in att[r.clone()].iter_mut().zip(&v[r.clone()]) {
                        *a += wj * vv;
                    }
                }
            }
            let o = b.o.apply(p, &att);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = b.ln2.apply(p, &x);
            let f: Vec<f64> = b.ff1.apply(p, &h).into_iter().map(gelu).collect();
            let f = b.ff2.apply(p, &f);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        self.len += 1;
        let x = m.parts.ln_f.apply(p, &x);
        Ok(m.parts.out.apply(p, &x))
    }
}

#[cfg(test)]
mod tests;
