//! Candidate re-ranker: a bidirectional encoder over `[cls] u [sep_resp] r`
//! with six regression heads on the summary position, pretrained by masked
//! token prediction.

mod data;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{CLS, SEP_RESP};
use crate::corpus::{Dialogue, Speaker, Vocab};
use crate::error::{Error, Result};
use crate::nn::{segments_for, Block, LayerNorm, Linear};
use crate::numkernel::{Checkpoint, CheckpointHeader, Graph, ParamId, ParamStore, Tensor, Var};

pub use data::{clean_candidates, compute_targets, RerankExample, Targets, TARGET_NAMES};
pub use train::{
    finetune_regression, mask_positions, mlm_accuracy, mlm_pretrain, regression_loss, summed_mse,
    unigram_baseline, FinetuneConfig, FinetuneLog, MlmConfig, MlmLog,
};

pub const CHECKPOINT_KIND: &str = "reranker";
pub const NUM_TARGETS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankerConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl RerankerConfig {
    pub fn desk() -> Self {
        Self { dim: 64, heads: 2, ff: 128, layers: 2, max_len: 128 }
    }

    pub fn paper() -> Self {
        Self { dim: 768, heads: 12, ff: 3072, layers: 12, max_len: 256 }
    }
}

/// Per-target mean and spread of training targets, for optional z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: [f64; NUM_TARGETS],
    pub std: [f64; NUM_TARGETS],
}

#[derive(Clone, Debug)]
struct Parts {
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    mlm: Linear,
    heads: Linear,
}

impl Parts {
    fn bind(p: &ParamStore, cfg: &RerankerConfig) -> Result<Self> {
        Ok(Self {
            embed: p.id("embed")?,
            pos: p.id("pos")?,
            blocks: (0..cfg.layers)
                .map(|l| Block::bind(p, &format!("block{l}"), cfg.heads))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::bind(p, "ln_f")?,
            mlm: Linear::bind(p, "mlm")?,
            heads: Linear::bind(p, "heads")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Reranker {
    pub config: RerankerConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub target_stats: Option<TargetStats>,
    parts: Parts,
}

impl Reranker {
    pub fn new<R: Rng + ?Sized>(config: RerankerConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        if config.dim % config.heads != 0 {
            return Err(Error::Config("model dim must be divisible by heads".into()));
        }
        let v = vocab.len();
        let mut p = ParamStore::new();
        p.add("embed", Tensor::randn(&[v, config.dim], 0.1, rng))?;
        p.add("pos", Tensor::randn(&[config.max_len, config.dim], 0.1, rng))?;
        for l in 0..config.layers {
            Block::init(&mut p, &format!("block{l}"), config.dim, config.heads, config.ff, rng)?;
        }
        LayerNorm::init(&mut p, "ln_f", config.dim)?;
        Linear::init(&mut p, "mlm", config.dim, v, true, rng)?;
        Linear::init(&mut p, "heads", config.dim, NUM_TARGETS, true, rng)?;
        let parts = Parts::bind(&p, &config)?;
        Ok(Self { config, vocab, params: p, target_stats: None, parts })
    }

    pub fn heads_bias_id(&self) -> ParamId {
        self.parts.heads.b.expect("heads carry a bias")
    }

    /// `[cls] u [sep_resp] r`, dropping tokens from the left of `u` and then
    /// the right of `r` when over-long.
    pub fn input_ids(&self, u: &str, r: &str) -> Vec<usize> {
        let u = self.vocab.encode(u);
        let mut r = self.vocab.encode(r);
        let max = self.config.max_len;
        r.truncate(max - 2);
        let keep = u.len().min(max - 2 - r.len());
        let mut ids = Vec::with_capacity(keep + r.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(&u[u.len() - keep..]);
        ids.push(SEP_RESP);
        ids.extend(r);
        ids
    }

    /// `(u, r)` sequences for every system turn with a preceding user turn.
    pub fn pair_sequences(&self, dialogues: &[Dialogue]) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for d in dialogues {
            for (i, t) in d.turns.iter().enumerate().skip(1) {
                if t.speaker == Speaker::System {
                    out.push(self.input_ids(&d.turns[i - 1].text, &t.text));
                }
            }
        }
        out
    }

    pub fn encode_examples(&self, examples: &[RerankExample]) -> Vec<(Vec<usize>, Targets)> {
        examples.iter().map(|e| (self.input_ids(&e.u, &e.r), e.targets)).collect()
    }

    /// Final-layer states `[N×dim]` for packed sequences.
    pub fn states(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.is_empty() || s.len() > self.config.max_len {
                return Err(Error::shape("reranker encode", format!("sequence length {}", s.len())));
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
            x = b.forward(g, store, x, &segments, false, None)?;
        }
        self.parts.ln_f.forward(g, store, x)
    }

    /// Masked-token logits `[N×V]`.
    pub fn mlm_logits(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Var> {
        let s = self.states(g, store, seqs)?;
        self.parts.mlm.forward(g, store, s)
    }

    /// Head outputs `[B×6]` read from each sequence's first position.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Var> {
        let s = self.states(g, store, seqs)?;
        let starts: Vec<usize> = segments_for(&seqs.iter().map(Vec::len).collect::<Vec<_>>())
            .into_iter()
            .map(|(start, _)| start)
            .collect();
        let cls = g.embedding(s, &starts)?;
        self.parts.heads.forward(g, store, cls)
    }

    /// Six head outputs for each candidate.
    pub fn head_outputs(&self, u: &str, candidates: &[&str]) -> Result<Vec<[f64; NUM_TARGETS]>> {
        let seqs: Vec<Vec<usize>> = candidates.iter().map(|c| self.input_ids(u, c)).collect();
        let mut g = Graph::no_grad();
        let out = self.predict(&mut g, &self.params, &seqs)?;
        let t = g.value(out);
        Ok((0..candidates.len())
            .map(|i| {
                let mut row = [0.0; NUM_TARGETS];
                row.copy_from_slice(t.row(i));
                row
            })
            .collect())
    }

    /// Summed head scores and the index of the first maximum. With
    /// `zscore`, each head is standardised by the training target stats.
    pub fn rerank(&self, u: &str, candidates: &[&str], zscore: bool) -> Result<(usize, Vec<f64>)> {
        if candidates.is_empty() {
            return Err(Error::Usage("rerank needs at least one candidate".into()));
        }
        let stats = match (zscore, &self.target_stats) {
            (true, Some(s)) => Some(s),
            (true, None) => return Err(Error::Config("z-scoring needs target statistics".into())),
            _ => None,
        };
        let scores: Vec<f64> = self
            .head_outputs(u, candidates)?
            .iter()
            .map(|h| {
                h.iter()
                    .enumerate()
                    .map(|(t, v)| match stats {
                        Some(s) => (v - s.mean[t]) / s.std[t],
                        None => *v,
                    })
                    .sum()
            })
            .collect();
        let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        Ok((best, scores))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                vocab_hash: self.vocab.hash(),
                config: serde_json::to_value(&self.config)?,
                extra: serde_json::json!({ "vocab": self.vocab, "target_stats": self.target_stats }),
            },
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: RerankerConfig = serde_json::from_value(ck.header.config)?;
        let vocab: Vocab = serde_json::from_value(ck.header.extra["vocab"].clone())?;
        let target_stats = serde_json::from_value(ck.header.extra["target_stats"].clone())?;
        if vocab.hash() != ck.header.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let parts = Parts::bind(&ck.params, &config)?;
        Ok(Self { config, vocab, params: ck.params, target_stats, parts })
    }
}

#[cfg(test)]
mod tests;
