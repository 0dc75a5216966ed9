//! Semantically controlled LSTM generator with an optional contextual
//! initial state.
//!
//! Row-vector convention: activations are `[B×n]`, weights `[in×out]`.
//!
//! ```text
//! i = σ(w W_wi + h W_hi)    f = σ(w W_wf + h W_hf)    o = σ(w W_wo + h W_ho)
//! ĉ = tanh(w W_wc + h W_hc)
//! r = σ(w W_wr + α h W_hr)  d' = r ⊙ d
//! c' = f ⊙ c + i ⊙ ĉ + tanh(d' W_dc)
//! h' = o ⊙ tanh(c')
//! ```
//!
//! The four gate matrices are stored side by side as `w_x = [W_wi W_wf W_wo
//! W_wc]` and `w_h = [W_hi W_hf W_ho W_hc]`. With a context embedding the
//! initial hidden state is `tanh(C_e W + b)`, otherwise zero.

mod beam;
mod sweep;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextSpec, DaInventory, DialogueAct, Vocab};
use crate::error::{Error, Result};
use crate::numkernel::{Checkpoint, CheckpointHeader, Graph, ParamId, ParamStore, Tensor, Var};

pub use beam::{beam_decode, greedy_decode, DecodeOptions, Hypothesis};
pub use sweep::{context_sweep, decode_dialogues, SweepConfig, SweepReport, SWEEP_ROWS};
pub use train::{batch_loss, build_examples, mean_loss, spec_label, train, Example, TrainConfig, TrainLog};

pub const CHECKPOINT_KIND: &str = "sclstm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SclstmConfig {
    pub d_w: usize,
    pub d_g: usize,
    /// Context embedding size; `None` for the zero-initialised baseline.
    pub d_c: Option<usize>,
    pub alpha: f64,
    /// Window fed to the context encoder.
    pub context: Option<ContextSpec>,
}

impl SclstmConfig {
    pub fn desk(context: Option<ContextSpec>, d_c: usize) -> Self {
        Self {
            d_w: 64,
            d_g: 64,
            d_c: context.map(|_| d_c),
            alpha: 1.0,
            context,
        }
    }

    pub fn paper(context: Option<ContextSpec>, d_c: usize) -> Self {
        Self { d_w: 300, d_g: 300, ..Self::desk(context, d_c) }
    }
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    w_x: ParamId,
    w_h: ParamId,
    w_wr: ParamId,
    w_hr: ParamId,
    w_dc: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    ctx: Option<(ParamId, ParamId)>,
}

impl Ids {
    fn bind(p: &ParamStore, contextual: bool) -> Result<Self> {
        Ok(Self {
            embed: p.id("embed")?,
            w_x: p.id("w_x")?,
            w_h: p.id("w_h")?,
            w_wr: p.id("w_wr")?,
            w_hr: p.id("w_hr")?,
            w_dc: p.id("w_dc")?,
            w_out: p.id("w_out")?,
            b_out: p.id("b_out")?,
            ctx: if contextual {
                Some((p.id("ctx_w")?, p.id("ctx_b")?))
            } else {
                None
            },
        })
    }
}

/// Recurrent state for a batch of rows.
#[derive(Clone, Copy, Debug)]
pub struct State {
    pub h: Var,
    pub c: Var,
    pub d: Var,
}

fn build_params<R: Rng + ?Sized>(
    config: &SclstmConfig,
    v: usize,
    k: usize,
    rng: &mut R,
) -> Result<(ParamStore, Ids)> {
    let (dw, dg) = (config.d_w, config.d_g);
    let s_x = (1.0 / dw as f64).sqrt();
    let s_h = (1.0 / dg as f64).sqrt();
    let mut p = ParamStore::new();
    p.add("embed", Tensor::randn(&[v, dw], 0.1, rng))?;
    p.add("w_x", Tensor::randn(&[dw, 4 * dg], s_x, rng))?;
    p.add("w_h", Tensor::randn(&[dg, 4 * dg], s_h, rng))?;
    p.add("w_wr", Tensor::randn(&[dw, k], s_x, rng))?;
    p.add("w_hr", Tensor::randn(&[dg, k], s_h, rng))?;
    p.add("w_dc", Tensor::randn(&[k, dg], (1.0 / k as f64).sqrt(), rng))?;
    p.add("w_out", Tensor::randn(&[dg, v], s_h, rng))?;
    p.add("b_out", Tensor::zeros(&[v]))?;
    if let Some(dc) = config.d_c {
        p.add("ctx_w", Tensor::randn(&[dc, dg], (1.0 / dc as f64).sqrt(), rng))?;
        p.add("ctx_b", Tensor::zeros(&[dg]))?;
    }
    let ids = Ids::bind(&p, config.d_c.is_some())?;
    Ok((p, ids))
}

#[derive(Clone, Debug)]
pub struct Sclstm {
    pub config: SclstmConfig,
    pub vocab: Vocab,
    pub inventory: DaInventory,
    pub params: ParamStore,
    ids: Ids,
}

impl Sclstm {
    pub fn new<R: Rng + ?Sized>(
        config: SclstmConfig,
        vocab: Vocab,
        inventory: DaInventory,
        rng: &mut R,
    ) -> Result<Self> {
        if inventory.is_empty() {
            return Err(Error::Data("empty dialogue-act inventory".into()));
        }
        let (params, ids) = build_params(&config, vocab.len(), inventory.len(), rng)?;
        Ok(Self { config, vocab, inventory, params, ids })
    }

    /// Bare model over `vocab_size` output ids and `num_acts` acts, for
    /// tests and oracles that do not need a real vocabulary.
    pub fn synthetic<R: Rng + ?Sized>(
        config: SclstmConfig,
        vocab: Vocab,
        vocab_size: usize,
        num_acts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (params, ids) = build_params(&config, vocab_size, num_acts, rng)?;
        let inventory = DaInventory::from_keys((0..num_acts).map(|i| format!("act{i:03}{{x()}}")));
        Ok(Self { config, vocab, inventory, params, ids })
    }

    pub fn output_size(&self) -> usize {
        self.params.tensor(self.ids.b_out).numel()
    }

    pub fn num_acts(&self) -> usize {
        self.params.tensor(self.ids.w_dc).matrix_dims().0
    }

    pub fn is_contextual(&self) -> bool {
        self.ids.ctx.is_some()
    }

    pub fn da_index(&self, da: &DialogueAct) -> Result<usize> {
        self.inventory.index_of(da)
    }

    /// Initial state for a batch. `ctx` is `[B×d_c]` when contextual.
    pub fn init_state(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: Option<Var>,
        da_indices: &[usize],
    ) -> Result<State> {
        let b = da_indices.len();
        let dg = self.config.d_g;
        let k = self.num_acts();
        let h = match (ctx, self.ids.ctx) {
            (Some(cv), Some((w, bias))) => {
                let w = g.param(store, w);
                let bias = g.param(store, bias);
                let z = g.matmul(cv, w)?;
                let z = g.add(z, bias)?;
                g.tanh(z)?
            }
            (None, None) => g.constant(Tensor::zeros(&[b, dg])),
            (Some(_), None) => {
                return Err(Error::Usage("context given to a model without context projection".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Usage("contextual model needs a context embedding".into()))
            }
        };
        let c = g.constant(Tensor::zeros(&[b, dg]));
        let mut one_hot = vec![0.0; b * k];
        for (row, &i) in da_indices.iter().enumerate() {
            if i >= k {
                return Err(Error::shape("init_state", format!("act index {i} >= {k}")));
            }
            one_hot[row * k + i] = 1.0;
        }
        let d = g.constant(Tensor::new(&[b, k], one_hot)?);
        Ok(State { h, c, d })
    }

    /// One step for a batch of input tokens. Returns the next state and
    /// output logits `[B×V]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize], s: State) -> Result<(State, Var)> {
        let table = g.param(store, self.ids.embed);
        let x = g.embedding(table, tokens)?;
        self.step_embedded(g, store, x, s)
    }

    pub fn step_embedded(&self, g: &mut Graph, store: &ParamStore, x: Var, s: State) -> Result<(State, Var)> {
        let dg = self.config.d_g;
        let w_x = g.param(store, self.ids.w_x);
        let w_h = g.param(store, self.ids.w_h);
        let gx = g.matmul(x, w_x)?;
        let gh = g.matmul(s.h, w_h)?;
        let pre = g.add(gx, gh)?;
        let i_pre = g.slice_cols(pre, 0, dg)?;
        let f_pre = g.slice_cols(pre, dg, dg)?;
        let o_pre = g.slice_cols(pre, 2 * dg, dg)?;
        let c_pre = g.slice_cols(pre, 3 * dg, dg)?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let o = g.sigmoid(o_pre)?;
        let c_hat = g.tanh(c_pre)?;

        let w_wr = g.param(store, self.ids.w_wr);
        let w_hr = g.param(store, self.ids.w_hr);
        let rx = g.matmul(x, w_wr)?;
        let rh = g.matmul(s.h, w_hr)?;
        let rh = g.scale(rh, self.config.alpha)?;
        let r_pre = g.add(rx, rh)?;
        let r = g.sigmoid(r_pre)?;
        let d = g.mul(r, s.d)?;

        let w_dc = g.param(store, self.ids.w_dc);
        let dc = g.matmul(d, w_dc)?;
        let dc = g.tanh(dc)?;
        let fc = g.mul(f, s.c)?;
        let ic = g.mul(i, c_hat)?;
        let c = g.add(fc, ic)?;
        let c = g.add(c, dc)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;

        let w_out = g.param(store, self.ids.w_out);
        let b_out = g.param(store, self.ids.b_out);
        let logits = g.matmul(h, w_out)?;
        let logits = g.add(logits, b_out)?;
        Ok((State { h, c, d }, logits))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                vocab_hash: self.vocab.hash(),
                config: serde_json::to_value(&self.config)?,
                extra: serde_json::json!({ "vocab": self.vocab, "inventory": self.inventory }),
            },
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: SclstmConfig = serde_json::from_value(ck.header.config)?;
        let vocab: Vocab = serde_json::from_value(ck.header.extra["vocab"].clone())?;
        let inventory: DaInventory = serde_json::from_value(ck.header.extra["inventory"].clone())?;
        if vocab.hash() != ck.header.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let ids = Ids::bind(&ck.params, config.d_c.is_some())?;
        Ok(Self { config, vocab, inventory, params: ck.params, ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::linalg::sigmoid;
    use crate::numkernel::{grad_check_with, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, contextual: bool) -> Sclstm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SclstmConfig {
            d_w: 3,
            d_g: 4,
            d_c: contextual.then_some(5),
            alpha: 0.7,
            context: contextual.then_some(ContextSpec::new(1, 1)),
        };
        let vocab = Vocab::from_counts(&Default::default(), 1).unwrap();
        Sclstm::synthetic(cfg, vocab, 6, 3, &mut rng).unwrap()
    }

    fn get(m: &Sclstm, name: &str) -> (Vec<f64>, usize) {
        let t = m.params.get(name).unwrap();
        (t.data().to_vec(), t.matrix_dims().1)
    }

    /// Scalar-loop implementation of one step, for a single row.
    fn oracle_step(m: &Sclstm, tok: usize, h: &[f64], c: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (emb, dw) = get(m, "embed");
        let x = &emb[tok * dw..(tok + 1) * dw];
        let (wx, n4) = get(m, "w_x");
        let (wh, _) = get(m, "w_h");
        let (wwr, k) = get(m, "w_wr");
        let (whr, _) = get(m, "w_hr");
        let (wdc, dg) = get(m, "w_dc");
        let (wout, v) = get(m, "w_out");
        let (bout, _) = get(m, "b_out");
        let gate = |col: usize| -> f64 {
            let mut s = 0.0;
            for a in 0..dw {
                s += x[a] * wx[a * n4 + col];
            }
            for a in 0..dg {
                s += h[a] * wh[a * n4 + col];
            }
            s
        };
        let mut d2 = vec![0.0; k];
        for j in 0..k {
            let mut s = 0.0;
            for a in 0..dw {
                s += x[a] * wwr[a * k + j];
            }
            let mut sh = 0.0;
            for a in 0..dg {
                sh += h[a] * whr[a * k + j];
            }
            d2[j] = sigmoid(s + m.config.alpha * sh) * d[j];
        }
        let mut c2 = vec![0.0; dg];
        let mut h2 = vec![0.0; dg];
        for u in 0..dg {
            let i = sigmoid(gate(u));
            let f = sigmoid(gate(dg + u));
            let o = sigmoid(gate(2 * dg + u));
            let ch = gate(3 * dg + u).tanh();
            let mut dd = 0.0;
            for j in 0..k {
                dd += d2[j] * wdc[j * dg + u];
            }
            c2[u] = f * c[u] + i * ch + dd.tanh();
            h2[u] = o * c2[u].tanh();
        }
        let mut logits = bout.clone();
        for y in 0..v {
            for u in 0..dg {
                logits[y] += h2[u] * wout[u * v + y];
            }
        }
        (h2, c2, d2, logits)
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let m = tiny(11, true);
        let ctx = vec![0.2, -0.4, 0.1, 0.9, -0.3];
        let mut g = Graph::no_grad();
        let cv = g.constant(Tensor::new(&[1, 5], ctx.clone()).unwrap());
        let mut s = m.init_state(&mut g, &m.params, Some(cv), &[2]).unwrap();

        let (cw, dg) = get(&m, "ctx_w");
        let (cb, _) = get(&m, "ctx_b");
        let mut h: Vec<f64> = (0..dg)
            .map(|u| (cb[u] + (0..5).map(|a| ctx[a] * cw[a * dg + u]).sum::<f64>()).tanh())
            .collect();
        for (a, b) in g.value(s.h).data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut c = vec![0.0; dg];
        let mut d = vec![0.0, 0.0, 1.0];
        for tok in [1, 4, 3] {
            let (s2, logits) = m.step(&mut g, &m.params, &[tok], s).unwrap();
            let (h2, c2, d2, l2) = oracle_step(&m, tok, &h, &c, &d);
            for (var, want) in [(s2.h, &h2), (s2.c, &c2), (s2.d, &d2), (logits, &l2)] {
                for (a, b) in g.value(var).data().iter().zip(want.iter()) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
            (s, h, c, d) = (s2, h2, c2, d2);
        }
    }

    #[test]
    fn zero_parameters_give_half_gates() {
        let mut m = tiny(1, false);
        let names: Vec<String> = m.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for n in names {
            let shape = m.params.get(&n).unwrap().shape().to_vec();
            m.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::no_grad();
        let s = m.init_state(&mut g, &m.params, None, &[1]).unwrap();
        let (s1, _) = m.step(&mut g, &m.params, &[2], s).unwrap();
        assert_eq!(g.value(s1.d).data(), &[0.0, 0.5, 0.0]);
        assert!(g.value(s1.c).data().iter().all(|v| *v == 0.0));
        assert!(g.value(s1.h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_projection_gives_tanh_bias() {
        let mut m = tiny(2, true);
        m.params.set("ctx_w", Tensor::zeros(&[5, 4])).unwrap();
        m.params.set("ctx_b", Tensor::from_vec(vec![0.1, -0.2, 0.3, 2.0])).unwrap();
        let mut g = Graph::no_grad();
        let cv = g.constant(Tensor::new(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let s = m.init_state(&mut g, &m.params, Some(cv), &[0]).unwrap();
        let want: Vec<f64> = [0.1f64, -0.2, 0.3, 2.0].iter().map(|v| v.tanh()).collect();
        assert_eq!(g.value(s.h).data(), want.as_slice());
    }

    #[test]
    fn unrolled_cell_passes_grad_check() {
        for seed in 0..3 {
            let mut m = tiny(seed, true);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let ctx = Tensor::randn(&[2, 5], 1.0, &mut rng);
            let wts = Tensor::randn(&[2, 6], 1.0, &mut rng);
            let model = m.clone();
            let err = grad_check_with(
                |g, p| {
                    let cv = g.constant(ctx.clone());
                    let mut s = model.init_state(g, p, Some(cv), &[0, 2])?;
                    let mut total = None;
                    for toks in [[1, 2], [3, 3], [5, 0]] {
                        let (s2, logits) = model.step(g, p, &toks, s)?;
                        s = s2;
                        let w = g.constant(wts.clone());
                        let l = g.mul(logits, w)?;
                        let l = g.sum(l)?;
                        total = Some(match total {
                            Some(t) => g.add(t, l)?,
                            None => l,
                        });
                    }
                    let ds = g.sum(s.d)?;
                    g.add(total.unwrap(), ds)
                },
                &mut m.params,
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(4, true);
        let back = Sclstm::from_checkpoint(
            Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert!(back.params.bit_identical(&m.params));
        assert_eq!(back.inventory, m.inventory);
    }
}
