use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescale gradients so their global L2 norm is at most this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }
}

/// Optimizer state: config, moment buffers (adam) and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let (m, v) = match config.kind {
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = params
                    .iter()
                    .map(|(_, _, t)| vec![0.0; t.numel()])
                    .collect();
                (zeros.clone(), zeros)
            }
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            config,
            step: 0,
            first_moment: m,
            second_moment: v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.first_moment.get(index).map(Vec::as_slice)
    }

    /// Apply one update. `grads` is in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.iter().zip(grads) {
            if params.tensor(*id).shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "{}: param {:?} vs grad {:?}",
                        params.name(*id),
                        params.tensor(*id).shape(),
                        g.shape()
                    ),
                ));
            }
        }
        let scale = match self.config.clip_norm {
            Some(max_norm) => {
                let norm = global_norm(grads);
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (id, g) in ids.iter().zip(grads) {
                    let p = params.tensor_mut(*id).data_mut();
                    for (pv, gv) in p.iter_mut().zip(g.data()) {
                        *pv -= lr * gv * scale;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (i, (id, g)) in ids.iter().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    let p = params.tensor_mut(*id).data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j] * scale;
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
