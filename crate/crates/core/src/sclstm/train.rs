use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::corpus::{extract_context, tokenize, ContextSpec, Dialogue};
use crate::ctxencoder::ContextEncoder;
use crate::error::{Error, Result};
use crate::numkernel::{Graph, OptimizerConfig, OptimizerState, ParamStore, Tensor, Var};
use crate::sclstm::Sclstm;

/// One delexicalised target with its act and, for contextual models, the
/// frozen context embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub dialogue_id: String,
    pub turn: usize,
    pub da_index: usize,
    pub ctx: Option<Vec<f64>>,
    /// Response ids followed by EOS.
    pub target: Vec<usize>,
}

/// Examples for every annotated system turn. Acts outside the model's
/// inventory are skipped with a warning.
pub fn build_examples(
    model: &Sclstm,
    dialogues: &[Dialogue],
    encoder: Option<&ContextEncoder>,
    max_target_len: usize,
) -> Result<Vec<Example>> {
    let spec = model.config.context;
    if spec.is_some() != encoder.is_some() {
        return Err(Error::Usage(
            "a context encoder is required exactly when the model uses context".into(),
        ));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for d in dialogues {
        for i in d.target_indices() {
            let t = &d.turns[i];
            let da = t.da.as_ref().expect("target turns carry an act");
            let Ok(da_index) = model.da_index(da) else {
                skipped += 1;
                continue;
            };
            let delex = t.delex_text.as_deref().unwrap_or(&t.text);
            let mut target: Vec<usize> = tokenize(delex).iter().map(|w| model.vocab.id(w)).collect();
            target.truncate(max_target_len.saturating_sub(1));
            target.push(EOS);
            let ctx = match (encoder, spec) {
                (Some(enc), Some(spec)) => Some(enc.encode(&extract_context(d, i, spec)?)?),
                _ => None,
            };
            out.push(Example {
                dialogue_id: d.id.clone(),
                turn: i,
                da_index,
                ctx,
                target,
            });
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} turn(s) skipped: act not in the model inventory");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
    pub max_target_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            optimizer: OptimizerConfig::adam(5e-3).with_clip(5.0),
            max_target_len: 60,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_dev_loss: f64,
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Teacher-forced cross-entropy over a padded batch.
pub fn batch_loss(model: &Sclstm, g: &mut Graph, store: &ParamStore, batch: &[&Example]) -> Result<Var> {
    let b = batch.len();
    let steps = batch.iter().map(|e| e.target.len()).max().unwrap_or(0);
    let da: Vec<usize> = batch.iter().map(|e| e.da_index).collect();
    let ctx = if model.is_contextual() {
        let dc = model.config.d_c.unwrap_or(0);
        let mut flat = Vec::with_capacity(b * dc);
        for e in batch {
            let c = e.ctx.as_ref().ok_or_else(|| Error::Usage("example lacks a context embedding".into()))?;
            flat.extend_from_slice(c);
        }
        Some(g.constant(Tensor::new(&[b, dc], flat)?))
    } else {
        None
    };
    let mut state = model.init_state(g, store, ctx, &da)?;
    let mut logits = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps * b);
    let mut include = Vec::with_capacity(steps * b);
    for t in 0..steps {
        let inputs: Vec<usize> = batch
            .iter()
            .map(|e| match t {
                0 => BOS,
                _ if t < e.target.len() => e.target[t - 1],
                _ => PAD,
            })
            .collect();
        let (s, l) = model.step(g, store, &inputs, state)?;
        state = s;
        logits.push(l);
        for e in batch {
            targets.push(e.target.get(t).copied().unwrap_or(PAD));
            include.push(t < e.target.len());
        }
    }
    let all = g.concat_rows(&logits)?;
    g.cross_entropy(all, &targets, &include)
}

/// Token-weighted mean loss over `examples`.
pub fn mean_loss(model: &Sclstm, examples: &[Example], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::no_grad();
        let l = batch_loss(model, &mut g, &model.params, &refs)?;
        let n: usize = chunk.iter().map(|e| e.target.len()).sum();
        total += g.value(l).item() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Data("no examples to score".into()));
    }
    Ok(total / tokens as f64)
}

/// Adam training with early stopping on dev loss; returns the best model.
pub fn train(
    mut model: Sclstm,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Sclstm, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let dev_set = if dev.is_empty() { train } else { dev };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut log = TrainLog {
        initial_dev_loss: mean_loss(&model, dev_set, cfg.batch_size)?,
        ..Default::default()
    };
    let mut best = (log.initial_dev_loss, model.params.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut bad_epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&model, &mut g, &model.params, &batch)?;
            sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?.for_store(&model.params);
            drop(g);
            opt.step(&mut model.params, &grads)?;
        }
        let dev_loss = mean_loss(&model, dev_set, cfg.batch_size)?;
        log.train_loss.push(sum / batches as f64);
        log.dev_loss.push(dev_loss);
        log::info!("sclstm epoch {epoch}: train {:.4} dev {dev_loss:.4}", sum / batches as f64);
        if dev_loss < best.0 {
            best = (dev_loss, model.params.clone());
            log.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, log))
}

/// Context spec of a model, for display.
pub fn spec_label(spec: Option<ContextSpec>) -> String {
    spec.map(|s| s.to_string()).unwrap_or_else(|| "none".into())
}
