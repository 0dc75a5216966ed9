use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{is_reserved, MASK};
use crate::error::{Error, Result};
use crate::numkernel::{Graph, OptimizerConfig, OptimizerState, ParamStore, Var};
use crate::reranker::{Reranker, Targets, TargetStats, NUM_TARGETS};

/// Replaces each non-reserved position by MASK with probability `prob`.
/// Returns the masked ids and the original id at each masked position.
pub fn mask_positions<R: Rng + ?Sized>(ids: &[usize], prob: f64, rng: &mut R) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut out = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    for (i, &t) in ids.iter().enumerate() {
        if !is_reserved(t) && rng.gen_bool(prob) {
            out[i] = MASK;
            targets[i] = Some(t);
        }
    }
    (out, targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            batch_size: 32,
            max_epochs: 10,
            patience: 2,
            optimizer: OptimizerConfig::adam(1e-3).with_clip(5.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmLog {
    pub initial_dev_accuracy: f64,
    pub train_loss: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    pub best_epoch: usize,
    /// Accuracy of always predicting the most frequent training token.
    pub unigram_baseline: f64,
}

type Masked = (Vec<usize>, Vec<Option<usize>>);

fn mlm_loss(model: &Reranker, g: &mut Graph, store: &ParamStore, batch: &[&Masked]) -> Result<Option<Var>> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|m| m.0.clone()).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|m| m.1.iter().map(|t| t.unwrap_or(0))).collect();
    let include: Vec<bool> = batch.iter().flat_map(|m| m.1.iter().map(Option::is_some)).collect();
    if !include.iter().any(|&x| x) {
        return Ok(None);
    }
    let logits = model.mlm_logits(g, store, &seqs)?;
    Ok(Some(g.cross_entropy(logits, &targets, &include)?))
}

/// Fraction of masked positions predicted exactly.
pub fn mlm_accuracy(model: &Reranker, masked: &[Masked]) -> Result<f64> {
    let (mut hits, mut count) = (0usize, 0usize);
    for chunk in masked.chunks(32) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|m| m.0.clone()).collect();
        let mut g = Graph::no_grad();
        let l = model.mlm_logits(&mut g, &model.params, &seqs)?;
        let l = g.value(l);
        let mut row = 0;
        for m in chunk {
            for t in &m.1 {
                if let Some(t) = t {
                    let r = l.row(row);
                    let arg = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
                    hits += usize::from(arg == *t);
                    count += 1;
                }
                row += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("no masked positions to score".into()));
    }
    Ok(hits as f64 / count as f64)
}

/// Accuracy on `masked` of always predicting the most frequent
/// non-reserved token of `train`.
pub fn unigram_baseline(train: &[Vec<usize>], masked: &[Masked]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for s in train {
        for &t in s.iter().filter(|&&t| !is_reserved(t)) {
            *counts.entry(t).or_insert(0usize) += 1;
        }
    }
    let top = counts.iter().max_by_key(|(t, c)| (**c, std::cmp::Reverse(**t))).map(|(t, _)| *t);
    let (mut hits, mut n) = (0usize, 0usize);
    for m in masked {
        for t in m.1.iter().flatten() {
            hits += usize::from(Some(*t) == top);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Masked-token pretraining with fresh masks each epoch and a fixed dev
/// masking; early stopping on dev accuracy.
pub fn mlm_pretrain(
    mut model: Reranker,
    train: &[Vec<usize>],
    dev: &[Vec<usize>],
    cfg: &MlmConfig,
    seed: u64,
) -> Result<(Reranker, MlmLog)> {
    let train: Vec<&Vec<usize>> = train.iter().filter(|s| s.iter().any(|&t| !is_reserved(t))).collect();
    if train.is_empty() {
        return Err(Error::Data("no maskable training sequences".into()));
    }
    let dev_src: Vec<Vec<usize>> = if dev.is_empty() { train.iter().map(|s| (*s).clone()).collect() } else { dev.to_vec() };
    let mut dev_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_6d64);
    let dev_masked: Vec<Masked> = dev_src.iter().map(|s| mask_positions(s, cfg.mask_prob, &mut dev_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let owned: Vec<Vec<usize>> = train.iter().map(|s| (*s).clone()).collect();
    let mut log = MlmLog {
        initial_dev_accuracy: mlm_accuracy(&model, &dev_masked)?,
        unigram_baseline: unigram_baseline(&owned, &dev_masked),
        ..Default::default()
    };
    let mut best = (log.initial_dev_accuracy, model.params.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut bad = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let masked: Vec<Masked> = chunk.iter().map(|&i| mask_positions(train[i], cfg.mask_prob, &mut rng)).collect();
            let refs: Vec<&Masked> = masked.iter().collect();
            let mut g = Graph::new();
            let Some(loss) = mlm_loss(&model, &mut g, &model.params, &refs)? else {
                continue;
            };
            sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?.for_store(&model.params);
            drop(g);
            opt.step(&mut model.params, &grads)?;
        }
        let acc = mlm_accuracy(&model, &dev_masked)?;
        log.train_loss.push(sum / batches.max(1) as f64);
        log.dev_accuracy.push(acc);
        log::info!("mlm epoch {epoch}: train {:.4} dev acc {acc:.4}", sum / batches.max(1) as f64);
        if acc > best.0 {
            best = (acc, model.params.clone());
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            optimizer: OptimizerConfig::adam(1e-3).with_clip(5.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub initial_train_loss: f64,
    pub initial_dev_loss: f64,
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Sum over the six heads of each head's mean squared error.
pub fn regression_loss(model: &Reranker, g: &mut Graph, store: &ParamStore, batch: &[&(Vec<usize>, Targets)]) -> Result<Var> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|b| b.0.clone()).collect();
    let y: Vec<f64> = batch.iter().flat_map(|b| b.1 .0).collect();
    let pred = model.predict(g, store, &seqs)?;
    let mse = g.mse(pred, &y)?;
    g.scale(mse, NUM_TARGETS as f64)
}

pub fn summed_mse(model: &Reranker, data: &[(Vec<usize>, Targets)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(32) {
        let refs: Vec<&(Vec<usize>, Targets)> = chunk.iter().collect();
        let mut g = Graph::no_grad();
        let l = regression_loss(model, &mut g, &model.params, &refs)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn stats(data: &[(Vec<usize>, Targets)]) -> TargetStats {
    let n = data.len() as f64;
    let mut mean = [0.0; NUM_TARGETS];
    let mut std = [0.0; NUM_TARGETS];
    for (_, t) in data {
        for k in 0..NUM_TARGETS {
            mean[k] += t.0[k] / n;
        }
    }
    for (_, t) in data {
        for k in 0..NUM_TARGETS {
            std[k] += (t.0[k] - mean[k]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-6);
    }
    TargetStats { mean, std }
}

/// Joint training of all six heads and the encoder; early stopping on dev
/// summed MSE.
pub fn finetune_regression(
    mut model: Reranker,
    train: &[(Vec<usize>, Targets)],
    dev: &[(Vec<usize>, Targets)],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(Reranker, FinetuneLog)> {
    if train.is_empty() {
        return Err(Error::Data("no regression examples".into()));
    }
    let dev = if dev.is_empty() { train } else { dev };
    model.target_stats = Some(stats(train));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut log = FinetuneLog {
        initial_train_loss: summed_mse(&model, train)?,
        initial_dev_loss: summed_mse(&model, dev)?,
        ..Default::default()
    };
    let mut best = (log.initial_dev_loss, model.params.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut bad = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&(Vec<usize>, Targets)> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let loss = regression_loss(&model, &mut g, &model.params, &refs)?;
            sum += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?.for_store(&model.params);
            drop(g);
            opt.step(&mut model.params, &grads)?;
        }
        let dl = summed_mse(&model, dev)?;
        log.train_loss.push(sum / batches as f64);
        log.dev_loss.push(dl);
        log::info!("rerank epoch {epoch}: train {:.4} dev {dl:.4}", sum / batches as f64);
        if dl < best.0 {
            best = (dl, model.params.clone());
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
