//! Context encoder: a small bidirectional attention encoder that maps a
//! dialogue window to a unit vector, trained as a response ranker with an
//! in-batch softmax over scaled cosine scores.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{self, Vocab};
use crate::corpus::{extract_context, tokenize, ContextSpec, ContextWindow, Dialogue, Speaker};
use crate::error::{Error, Result};
use crate::nn::{segments_for, Block, LayerNorm, Linear};
use crate::numkernel::{
    Checkpoint, CheckpointHeader, Graph, OptimizerConfig, OptimizerState, ParamStore, Tensor, Var,
};

pub const CHECKPOINT_KIND: &str = "ctxencoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub d_c: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self { dim: 64, d_c: 64, heads: 2, ff: 128, max_len: 128 }
    }

    pub fn paper() -> Self {
        Self { dim: 128, d_c: 512, heads: 4, ff: 512, max_len: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
    /// Fixed multiplier on cosine scores before the softmax.
    pub score_scale: f64,
    /// Window sizes `0u0s..=NuNs` are sampled per example.
    pub max_window: usize,
    /// Candidate pool size for dev MRR.
    pub eval_batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 12,
            patience: 3,
            optimizer: OptimizerConfig::adam(2e-3).with_clip(5.0),
            score_scale: 10.0,
            max_window: 5,
            eval_batch: 8,
        }
    }
}

#[derive(Clone, Debug)]
struct Parts {
    embed: crate::numkernel::ParamId,
    pos: crate::numkernel::ParamId,
    block: Block,
    ln_f: LayerNorm,
    proj: Linear,
}

impl Parts {
    fn bind(store: &ParamStore, heads: usize) -> Result<Self> {
        Ok(Self {
            embed: store.id("embed")?,
            pos: store.id("pos")?,
            block: Block::bind(store, "block0", heads)?,
            ln_f: LayerNorm::bind(store, "ln_f")?,
            proj: Linear::bind(store, "proj")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    parts: Parts,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        if config.dim % config.heads != 0 {
            return Err(Error::Config("encoder dim must be divisible by heads".into()));
        }
        let mut p = ParamStore::new();
        p.add("embed", Tensor::randn(&[vocab.len(), config.dim], 0.1, rng))?;
        p.add("pos", Tensor::randn(&[config.max_len, config.dim], 0.1, rng))?;
        Block::init(&mut p, "block0", config.dim, config.heads, config.ff, rng)?;
        LayerNorm::init(&mut p, "ln_f", config.dim)?;
        Linear::init(&mut p, "proj", config.dim, config.d_c, true, rng)?;
        let parts = Parts::bind(&p, config.heads)?;
        Ok(Self { config, vocab, params: p, parts })
    }

    pub fn d_c(&self) -> usize {
        self.config.d_c
    }

    /// Tagged token ids, oldest turn first, truncated from the oldest side.
    pub fn window_ids(&self, window: &ContextWindow) -> Vec<usize> {
        let mut ids = Vec::new();
        for (speaker, text) in window.turns() {
            ids.push(match speaker {
                Speaker::User => vocab::USR,
                Speaker::System => vocab::SYS,
            });
            ids.extend(tokenize(text).iter().map(|t| self.vocab.id(t)));
        }
        let max = self.config.max_len;
        if ids.len() > max {
            ids.drain(..ids.len() - max);
        }
        ids
    }

    pub fn text_ids(&self, text: &str) -> Vec<usize> {
        self.window_ids(&ContextWindow::single(text))
    }

    /// Per-token outputs `[N×dim]` for packed sequences.
    fn token_states(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos_ids = Vec::new();
        for s in seqs {
            if s.is_empty() || s.len() > self.config.max_len {
                return Err(Error::shape("encode", format!("sequence length {}", s.len())));
            }
            ids.extend_from_slice(s);
            pos_ids.extend((0..s.len()).rev());
        }
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let segments = segments_for(&lengths);
        let table = g.param(store, self.parts.embed);
        let pos = g.param(store, self.parts.pos);
        let te = g.embedding(table, &ids)?;
        let pe = g.embedding(pos, &pos_ids)?;
        let x = g.add(te, pe)?;
        let x = self.parts.block.forward(g, store, x, &segments, false, None)?;
        self.parts.ln_f.forward(g, store, x)
    }

    /// Unit-norm encodings `[B×d_c]` for packed sequences.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Var> {
        let pooled = self.pooled(g, store, seqs)?;
        g.l2_normalize_rows(pooled)
    }

    /// Projected mean-pooled states before normalisation.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<Var> {
        let states = self.token_states(g, store, seqs)?;
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let mut rows = Vec::with_capacity(seqs.len());
        for (start, len) in segments_for(&lengths) {
            let s = g.slice_rows(states, start, len)?;
            rows.push(g.mean_rows(s)?);
        }
        let stacked = g.concat_rows(&rows)?;
        self.parts.proj.forward(g, store, stacked)
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let v = self.forward(&mut g, &self.params, &[ids.to_vec()])?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn encode(&self, window: &ContextWindow) -> Result<Vec<f64>> {
        self.encode_ids(&self.window_ids(window))
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        self.encode(&ContextWindow::single(text))
    }

    /// Contextual token vectors of `text` (speaker tag excluded), unit norm.
    pub fn token_vectors(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let ids = self.text_ids(text);
        if ids.len() <= 1 {
            return Ok(Vec::new());
        }
        let mut g = Graph::no_grad();
        let states = self.token_states(&mut g, &self.params, &[ids.clone()])?;
        let t = g.value(states);
        let d = self.config.dim;
        Ok((1..ids.len())
            .map(|r| {
                let row = &t.data()[r * d..(r + 1) * d];
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter().map(|x| x / n).collect()
            })
            .collect())
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
        let config: EncoderConfig = serde_json::from_value(ck.header.config)?;
        let vocab: Vocab = serde_json::from_value(ck.header.extra["vocab"].clone())?;
        if vocab.hash() != ck.header.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let parts = Parts::bind(&ck.params, config.heads)?;
        Ok(Self { config, vocab, params: ck.params, parts })
    }
}

/// One (context, response) pair for ranking.
#[derive(Clone, Debug)]
pub struct RankPair {
    pub context: Vec<usize>,
    pub response: Vec<usize>,
}

fn pairs_for(
    enc: &ContextEncoder,
    dialogues: &[Dialogue],
    max_window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RankPair>> {
    let mut out = Vec::new();
    for d in dialogues {
        for i in d.target_indices() {
            let n = rng.gen_range(0..=max_window);
            let w = extract_context(d, i, ContextSpec::new(n, n))?;
            out.push(RankPair {
                context: enc.window_ids(&w),
                response: enc.text_ids(&d.turns[i].text),
            });
        }
    }
    Ok(out)
}

/// Mean reciprocal rank of each true response among the responses of its
/// pool. Ties count against the true response.
pub fn mean_reciprocal_rank(enc: &ContextEncoder, pairs: &[RankPair], pool: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in pairs.chunks(pool) {
        if chunk.len() < 2 {
            continue;
        }
        let seqs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|p| p.context.clone())
            .chain(chunk.iter().map(|p| p.response.clone()))
            .collect();
        let mut g = Graph::no_grad();
        let e = enc.forward(&mut g, &enc.params, &seqs)?;
        let v = g.value(e).data();
        let d = enc.d_c();
        let b = chunk.len();
        for i in 0..b {
            let c = &v[i * d..(i + 1) * d];
            let score = |j: usize| -> f64 {
                let r = &v[(b + j) * d..(b + j + 1) * d];
                c.iter().zip(r).map(|(x, y)| x * y).sum()
            };
            let truth = score(i);
            let rank = 1 + (0..b).filter(|&j| j != i && score(j) >= truth).count();
            total += 1.0 / rank as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no ranking pools to evaluate".into()));
    }
    Ok(total / n as f64)
}

/// In-batch softmax loss over `scale · cos(context_i, response_j)`.
pub fn ranking_loss(
    enc: &ContextEncoder,
    g: &mut Graph,
    store: &ParamStore,
    batch: &[RankPair],
    scale: f64,
) -> Result<Var> {
    let b = batch.len();
    let seqs: Vec<Vec<usize>> = batch
        .iter()
        .map(|p| p.context.clone())
        .chain(batch.iter().map(|p| p.response.clone()))
        .collect();
    let e = enc.forward(g, store, &seqs)?;
    let c = g.slice_rows(e, 0, b)?;
    let r = g.slice_rows(e, b, b)?;
    let rt = g.transpose(r)?;
    let s = g.matmul(c, rt)?;
    let s = g.scale(s, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    g.cross_entropy(s, &targets, &vec![true; b])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainLog {
    pub initial_dev_mrr: f64,
    pub dev_mrr: Vec<f64>,
    pub best_epoch: usize,
}

/// Train the encoder as a response ranker; keeps the best-dev-MRR weights.
pub fn pretrain_ranker(
    train: &[Dialogue],
    dev: &[Dialogue],
    vocab: &Vocab,
    config: &EncoderConfig,
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<(ContextEncoder, PretrainLog)> {
    if pcfg.batch_size < 2 {
        return Err(Error::Config("ranking batch size must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = ContextEncoder::new(config.clone(), vocab.clone(), &mut rng)?;
    let mut train_pairs = pairs_for(&enc, train, pcfg.max_window, &mut rng)?;
    if train_pairs.len() < pcfg.batch_size {
        return Err(Error::Data(format!(
            "{} training pairs, fewer than batch size {}",
            train_pairs.len(),
            pcfg.batch_size
        )));
    }
    let mut dev_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut dev_pairs = pairs_for(&enc, dev, pcfg.max_window, &mut dev_rng)?;
    dev_pairs.shuffle(&mut dev_rng);

    let initial = mean_reciprocal_rank(&enc, &dev_pairs, pcfg.eval_batch)?;
    let mut log = PretrainLog { initial_dev_mrr: initial, dev_mrr: Vec::new(), best_epoch: 0 };
    let mut best = (initial, enc.params.clone());
    let mut opt = OptimizerState::new(pcfg.optimizer, &enc.params);
    let mut bad_epochs = 0;
    for epoch in 1..=pcfg.max_epochs {
        // resample window sizes each epoch
        if epoch > 1 {
            train_pairs = pairs_for(&enc, train, pcfg.max_window, &mut rng)?;
        }
        train_pairs.shuffle(&mut rng);
        for batch in train_pairs.chunks(pcfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let loss = ranking_loss(&enc, &mut g, &enc.params, batch, pcfg.score_scale)?;
            let grads = g.backward(loss)?.for_store(&enc.params);
            drop(g);
            opt.step(&mut enc.params, &grads)?;
        }
        let mrr = mean_reciprocal_rank(&enc, &dev_pairs, pcfg.eval_batch)?;
        log::info!("encoder epoch {epoch}: dev MRR {mrr:.4}");
        log.dev_mrr.push(mrr);
        if mrr > best.0 {
            best = (mrr, enc.params.clone());
            log.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= pcfg.patience {
                break;
            }
        }
    }
    enc.params = best.1;
    Ok((enc, log))
}

/// Dev pairs drawn the same way as during pretraining, for reporting.
pub fn dev_pairs(enc: &ContextEncoder, dev: &[Dialogue], max_window: usize, seed: u64) -> Result<Vec<RankPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut p = pairs_for(enc, dev, max_window, &mut rng)?;
    p.shuffle(&mut rng);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, synthesize_toy_corpus, ToyGrammar};
    use crate::nn::cosine;

    fn tiny() -> (ContextEncoder, Vec<Dialogue>) {
        let c = synthesize_toy_corpus(&ToyGrammar::default_grammar(), 7).unwrap();
        let v = build_vocab(&c.train, 1).unwrap();
        let cfg = EncoderConfig { dim: 16, d_c: 8, heads: 2, ff: 32, max_len: 24 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (ContextEncoder::new(cfg, v, &mut rng).unwrap(), c.train)
    }

    #[test]
    fn encodings_are_unit_and_deterministic() {
        let (enc, train) = tiny();
        let w = extract_context(&train[0], 3, ContextSpec::new(2, 2)).unwrap();
        let a = enc.encode(&w).unwrap();
        let b = enc.encode(&w).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn long_windows_truncate_from_the_oldest_side() {
        let (enc, _) = tiny();
        let long = "word ".repeat(60);
        let w = ContextWindow {
            immediate_user: "is it free ?".into(),
            extra: vec![(Speaker::System, long)],
            spec: ContextSpec::new(0, 1),
        };
        let ids = enc.window_ids(&w);
        assert_eq!(ids.len(), enc.config.max_len);
        assert_eq!(*ids.last().unwrap(), enc.vocab.id("?"));
        enc.encode(&w).unwrap();
    }

    #[test]
    fn batch_and_single_encodings_agree() {
        let (enc, train) = tiny();
        let seqs: Vec<Vec<usize>> = train[..3].iter().map(|d| enc.text_ids(&d.turns[0].text)).collect();
        let mut g = Graph::no_grad();
        let e = enc.forward(&mut g, &enc.params, &seqs).unwrap();
        let d = enc.d_c();
        for (i, s) in seqs.iter().enumerate() {
            let single = enc.encode_ids(s).unwrap();
            for (a, b) in g.value(e).data()[i * d..(i + 1) * d].iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_batch_is_config_error() {
        let (enc, train) = tiny();
        let pcfg = PretrainConfig { batch_size: 1, ..Default::default() };
        assert!(matches!(
            pretrain_ranker(&train, &train, &enc.vocab, &enc.config, &pcfg, 0),
            Err(Error::Config(_))
        ));
    }
}
