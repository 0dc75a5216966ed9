//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward rule. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numkernel::linalg;
use crate::numkernel::{ParamId, ParamStore, Tensor};

/// Value assigned to masked-out attention scores.
pub const MASK_FILL: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Embedding(Var, Vec<usize>),
    MaskFill(Var, Vec<bool>),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. any node; zeros if the node was unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.node_grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, v)| self.wrt(*v))
    }

    /// One gradient per parameter in store order; unused parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        for (id, var) in &self.params {
            if let Some(g) = &self.node_grads[var.0] {
                out[id.0] = Tensor::from_parts(store.tensor(*id).shape().to_vec(), g.clone());
            }
        }
        out
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_vars: HashMap::new(),
        }
    }

    /// Forward-only graph; nothing requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.tensor(id).clone(),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    // ---- ops ----------------------------------------------------------

    /// `a[m×k] · b[k×n]`. `a` may be 1-D (treated as one row).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.matrix_dims();
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let n = tb.shape()[1];
        let data = linalg::matmul(ta.data(), tb.data(), m, k, n);
        let shape = if ta.shape().len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        self.push("matmul", Tensor::from_parts(shape, data), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = linalg::transpose(t.data(), r, c);
        self.push("transpose", Tensor::from_parts(vec![c, r], data), Op::Transpose(a), &[a])
    }

    /// `a + b`, where `b` either matches `a` or has as many elements as `a`'s
    /// last dim (broadcast over leading dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let (_, cols) = ta.matrix_dims();
        if tb.numel() != cols || tb.shape().iter().filter(|&&d| d != 1).count() > 1 {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {:?} onto {:?}", tb.shape(), ta.shape()),
            ));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| f(*x, *y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(op, value, kind, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, linalg::sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, linalg::gelu, Op::Gelu(a))
    }

    /// Softmax over the last dim.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, cols) = t.matrix_dims();
        let mut data = t.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                linalg::softmax_in_place(row);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Concatenate along the last dim; all inputs must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).matrix_dims().0;
        let one_d = self.value(parts[0]).shape().len() == 1;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.value(*p).matrix_dims();
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch {r} vs {rows}"),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let shape = if one_d { vec![total] } else { vec![rows, total] };
        self.push(
            "concat_cols",
            Tensor::from_parts(shape, data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Stack 2-D inputs with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).matrix_dims().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = self.value(*p).matrix_dims();
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch {c} vs {cols}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.matrix_dims();
        if start + width > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) out of {cols}", start + width),
            ));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let shape = if t.shape().len() == 1 {
            vec![width]
        } else {
            vec![rows, width]
        };
        self.push(
            "slice_cols",
            Tensor::from_parts(shape, data),
            Op::SliceCols(a, start),
            &[a],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.matrix_dims();
        if start + count > rows || t.shape().len() != 2 {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {}) out of {rows}", start + count),
            ));
        }
        let data = t.data()[start * cols..(start + count) * cols].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![count, cols], data),
            Op::SliceRows(a, start),
            &[a],
        )
    }

    /// Gather rows of a `[V×d]` table; backward accumulates repeated ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embedding", format!("id {id} >= vocab {v}")));
            }
            data.extend_from_slice(t.row(id));
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding(table, ids.to_vec()),
            &[table],
        )
    }

    /// Replace entries where `mask` is true with [`MASK_FILL`].
    pub fn mask_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::shape(
                "mask_fill",
                format!("mask len {} vs {}", mask.len(), t.numel()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(v, &m)| if m { MASK_FILL } else { *v })
            .collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("mask_fill", value, Op::MaskFill(a, mask.to_vec()), &[a])
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.matrix_dims();
        let mut data = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("layer_norm", value, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Scale each row to unit L2 norm. A zero row is a numeric error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, _) = t.matrix_dims();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let row = t.row(r);
            let n = linalg::dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::NonFinite { op: "l2_normalize_rows" });
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows(a, norms), &[a])
    }

    /// Mean negative log-likelihood over rows where `include` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], include: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = t.matrix_dims();
        if targets.len() != rows || include.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{rows} rows, {} targets, {} mask entries",
                    targets.len(),
                    include.len()
                ),
            ));
        }
        let count = include.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Usage("cross_entropy: every position is masked".into()));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            if !include[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {} >= vocab {v}", targets[r]),
                ));
            }
            let ls = linalg::log_softmax(t.row(r));
            total -= ls[targets[r]];
            for (p, l) in probs[r * v..(r + 1) * v].iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: include.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "mse",
                format!("{} predictions vs {} targets", t.numel(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / n;
        self.push("mse", Tensor::scalar(loss), Op::Mse(pred, targets.to_vec()), &[pred])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column-wise mean over rows: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.matrix_dims();
        if rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        self.push("mean_rows", Tensor::from_vec(out), Op::MeanRows(a), &[a])
    }

    // ---- backward -----------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let params = self.param_vars.iter().map(|(p, v)| (*p, *v)).collect();
        Ok(Gradients {
            node_grads: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.matrix_dims();
                let n = tb.shape()[1];
                if wants(*a) {
                    acc(grads, *a, linalg::matmul_a_bt(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    acc(grads, *b, linalg::matmul_at_b(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let t = self.value(*a);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                acc(grads, *a, linalg::transpose(g, c, r));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    acc(grads, *b, self.reduce_broadcast(*b, g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let broadcast = ta.shape() != tb.shape();
                if wants(*a) {
                    let d = if broadcast {
                        let bd = tb.data();
                        g.chunks(bd.len())
                            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x * y))
                            .collect()
                    } else {
                        g.iter().zip(tb.data()).map(|(x, y)| x * y).collect()
                    };
                    acc(grads, *a, d);
                }
                if wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    let d = if broadcast {
                        self.reduce_broadcast(*b, &prod)
                    } else {
                        prod
                    };
                    acc(grads, *b, d);
                }
            }
            Op::Scale(a, f) => acc(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, x)| g * linalg::gelu_grad(*x)).collect(),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (_, cols) = y.matrix_dims();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(y.data().chunks(cols)) {
                    let s = linalg::dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - s)));
                }
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.matrix_dims();
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.value(*p).matrix_dims();
                    if wants(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(grads, *p, d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if wants(*p) {
                        acc(grads, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).matrix_dims();
                let (_, width) = node.value.matrix_dims();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (_, cols) = self.value(*a).matrix_dims();
                let mut d = vec![0.0; self.value(*a).numel()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(grads, *a, d);
            }
            Op::Embedding(table, ids) => {
                let t = self.value(*table);
                let d_model = t.shape()[1];
                let mut d = vec![0.0; t.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in d[id * d_model..(id + 1) * d_model]
                        .iter_mut()
                        .zip(&g[i * d_model..(i + 1) * d_model])
                    {
                        *o += v;
                    }
                }
                acc(grads, *table, d);
            }
            Op::MaskFill(a, mask) => {
                let d = g
                    .iter()
                    .zip(mask)
                    .map(|(v, &m)| if m { 0.0 } else { *v })
                    .collect();
                acc(grads, *a, d);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let (_, cols) = y.matrix_dims();
                let n = cols as f64;
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), is) in g.chunks(cols).zip(y.data().chunks(cols)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = linalg::dot(gr, yr) / n;
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| is * (gv - mean_g - yv * mean_gy)));
                }
                acc(grads, *a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let (_, cols) = y.matrix_dims();
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), n) in g.chunks(cols).zip(y.data().chunks(cols)).zip(norms) {
                    let s = linalg::dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * s) / n));
                }
                acc(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).matrix_dims().1;
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for c in 0..v {
                        d[r * v + c] = probs[r * v + c] * scale;
                    }
                    d[r * v + t] -= scale;
                }
                acc(grads, *logits, d);
            }
            Op::Mse(pred, targets) => {
                let p = self.value(*pred).data();
                let n = targets.len() as f64;
                let d = p
                    .iter()
                    .zip(targets)
                    .map(|(p, y)| 2.0 * (p - y) / n * g[0])
                    .collect();
                acc(grads, *pred, d);
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).matrix_dims();
                let mut d = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    d.extend(g.iter().map(|v| v / rows as f64));
                }
                acc(grads, *a, d);
            }
        }
    }

    /// Sum a gradient of the broadcast output back to `b`'s shape.
    fn reduce_broadcast(&self, b: Var, g: &[f64]) -> Vec<f64> {
        let n = self.value(b).numel();
        if n == g.len() {
            return g.to_vec();
        }
        let mut d = vec![0.0; n];
        for row in g.chunks(n) {
            for (o, v) in d.iter_mut().zip(row) {
                *o += v;
            }
        }
        d
    }
}
