use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condlm::{build_sequence, CondLm, Triplet};
use crate::error::{Error, Result};
use crate::numkernel::{Graph, OptimizerConfig, OptimizerState, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondTrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for CondTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 10,
            patience: 2,
            optimizer: OptimizerConfig::adam(2e-3).with_clip(5.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CondTrainLog {
    pub initial_dev_loss: f64,
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub best_epoch: usize,
}

struct Batch {
    inputs: Vec<Vec<usize>>,
    targets: Vec<usize>,
    include: Vec<bool>,
}

fn make_batch(model: &CondLm, items: &[&Triplet]) -> Result<Batch> {
    let mut b = Batch { inputs: Vec::new(), targets: Vec::new(), include: Vec::new() };
    for t in items {
        let (ids, mask) = build_sequence(t, model.config.max_len)?;
        b.targets.extend_from_slice(&ids[1..]);
        b.include.extend(mask);
        b.inputs.push(ids[..ids.len() - 1].to_vec());
    }
    Ok(b)
}

fn batch_loss(model: &CondLm, g: &mut Graph, store: &ParamStore, b: &Batch) -> Result<Var> {
    let logits = model.forward(g, store, &b.inputs, None)?;
    g.cross_entropy(logits, &b.targets, &b.include)
}

/// Mean cross-entropy over all response positions.
pub fn mean_loss(model: &CondLm, data: &[Triplet], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Triplet> = chunk.iter().collect();
        let b = make_batch(model, &refs)?;
        let n = b.include.iter().filter(|&&x| x).count();
        let mut g = Graph::no_grad();
        let l = batch_loss(model, &mut g, &model.params, &b)?;
        total += g.value(l).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("no examples to score".into()));
    }
    Ok(total / count as f64)
}

/// Fraction of response positions whose argmax equals the gold token under
/// teacher forcing.
pub fn token_accuracy(model: &CondLm, data: &[Triplet], batch_size: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Triplet> = chunk.iter().collect();
        let b = make_batch(model, &refs)?;
        let mut g = Graph::no_grad();
        let logits = model.forward(&mut g, &model.params, &b.inputs, None)?;
        let l = g.value(logits);
        for (row, (&t, &inc)) in b.targets.iter().zip(&b.include).enumerate() {
            if !inc {
                continue;
            }
            let r = l.row(row);
            let arg = (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best });
            hits += usize::from(arg == t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no examples to score".into()));
    }
    Ok(hits as f64 / count as f64)
}

/// Adam on response positions with early stopping on dev loss.
pub fn train(
    mut model: CondLm,
    train: &[Triplet],
    dev: &[Triplet],
    cfg: &CondTrainConfig,
    seed: u64,
) -> Result<(CondLm, CondTrainLog)> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let dev_set = if dev.is_empty() { train } else { dev };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut log = CondTrainLog {
        initial_dev_loss: mean_loss(&model, dev_set, cfg.batch_size)?,
        ..Default::default()
    };
    let mut best = (log.initial_dev_loss, model.params.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut bad = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Triplet> = chunk.iter().map(|&i| &train[i]).collect();
            let b = make_batch(&model, &items)?;
            let mut g = Graph::new();
            let loss = batch_loss(&model, &mut g, &model.params, &b)?;
            sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?.for_store(&model.params);
            drop(g);
            opt.step(&mut model.params, &grads)?;
        }
        let dev_loss = mean_loss(&model, dev_set, cfg.batch_size)?;
        log.train_loss.push(sum / batches as f64);
        log.dev_loss.push(dev_loss);
        log::info!("condlm epoch {epoch}: train {:.4} dev {dev_loss:.4}", sum / batches as f64);
        if dev_loss < best.0 {
            best = (dev_loss, model.params.clone());
            log.best_epoch = epoch;
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, log))
}
