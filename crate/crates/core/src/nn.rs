//! Layers shared by the encoders and the conditional LM.

use rand::Rng;

use crate::error::Result;
use crate::numkernel::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (1.0 / inputs as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[inputs, outputs], std, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[outputs]))?)
        } else {
            None
        };
        Ok(Self { w, b, inputs, outputs })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b")).ok();
        let (inputs, outputs) = store.tensor(w).matrix_dims();
        Ok(Self { w, b, inputs, outputs })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Plain row-vector forward without a graph.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.tensor(self.w).data();
        let mut y = match self.b {
            Some(b) => store.tensor(b).data().to_vec(),
            None => vec![0.0; self.outputs],
        };
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &w[i * self.outputs..(i + 1) * self.outputs];
            for (yj, wj) in y.iter_mut().zip(row) {
                *yj += xi * wj;
            }
        }
        y
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gain: store.id(&format!("{name}.gain"))?,
            bias: store.id(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let gain = store.tensor(self.gain).data();
        let bias = store.tensor(self.bias).data();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * gain[i] + bias[i])
            .collect()
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

/// Row ranges `[start, start+len)` of sequences packed into one matrix.
pub type Segments = [(usize, usize)];

impl Block {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        assert!(dim % heads == 0, "model dim must divide into heads");
        Ok(Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim)?,
            q: Linear::init(store, &format!("{name}.q"), dim, dim, true, rng)?,
            // a key bias shifts every score of a row equally, so it is omitted
            k: Linear::init(store, &format!("{name}.k"), dim, dim, false, rng)?,
            v: Linear::init(store, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::init(store, &format!("{name}.o"), dim, dim, true, rng)?,
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim)?,
            ff1: Linear::init(store, &format!("{name}.ff1"), dim, ff, true, rng)?,
            ff2: Linear::init(store, &format!("{name}.ff2"), ff, dim, true, rng)?,
            heads,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::bind(store, &format!("{name}.ln1"))?,
            q: Linear::bind(store, &format!("{name}.q"))?,
            k: Linear::bind(store, &format!("{name}.k"))?,
            v: Linear::bind(store, &format!("{name}.v"))?,
            o: Linear::bind(store, &format!("{name}.o"))?,
            ln2: LayerNorm::bind(store, &format!("{name}.ln2"))?,
            ff1: Linear::bind(store, &format!("{name}.ff1"))?,
            ff2: Linear::bind(store, &format!("{name}.ff2"))?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.inputs
    }

    /// Forward over packed sequences; attention never crosses segments.
    /// When `trace` is given, each head's attention matrix is pushed to it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &Segments,
        causal: bool,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let dim = self.dim();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let h = self.ln1.forward(g, store, x)?;
        let q = self.q.forward(g, store, h)?;
        let k = self.k.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;

        let mut seq_out = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let (qs, ks, vs) = if segments.len() == 1 && start == 0 {
                (q, k, v)
            } else {
                (
                    g.slice_rows(q, start, len)?,
                    g.slice_rows(k, start, len)?,
                    g.slice_rows(v, start, len)?,
                )
            };
            let mask: Vec<bool> = if causal {
                (0..len * len).map(|i| i % len > i / len).collect()
            } else {
                Vec::new()
            };
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let (qh, kh, vh) = if self.heads == 1 {
                    (qs, ks, vs)
                } else {
                    (
                        g.slice_cols(qs, hd * dh, dh)?,
                        g.slice_cols(ks, hd * dh, dh)?,
                        g.slice_cols(vs, hd * dh, dh)?,
                    )
                };
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let mut s = g.scale(s, scale)?;
                if causal {
                    s = g.mask_fill(s, &mask)?;
                }
                let p = g.softmax(s)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(p);
                }
                heads.push(g.matmul(p, vh)?);
            }
            seq_out.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let att = if seq_out.len() == 1 { seq_out[0] } else { g.concat_rows(&seq_out)? };
        let att = self.o.forward(g, store, att)?;
        let x = g.add(x, att)?;

        let h = self.ln2.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Rows `[start, start+len)` for consecutive sequences of the given lengths.
pub fn segments_for(lengths: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &l in lengths {
        out.push((start, l));
        start += l;
    }
    out
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(crate::error::Error::shape(
            "cosine",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}
