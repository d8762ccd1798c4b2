//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value to the tape.
//! Nodes only ever reference earlier nodes, so the tape order is a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Leaves are either parameters (gradients wanted) or
//! constants; nodes that depend on no parameter are skipped on the way back.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] instead of propagating it.

use crate::tensor::{axis_split, finite, gemm, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Direction of the KL divergence used by [`Graph::kl_div`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// Σ p̂ log(p̂ / q): prediction in the first slot.
    #[default]
    PredictedFirst,
    /// Σ q log(q / p̂).
    TargetFirst,
}

/// Floor applied to both distributions inside the logarithm.
pub const KL_EPS: f64 = 1e-8;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    Kl {
        pred: Var,
        target: Tensor,
        direction: KlDirection,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        let value = finite(value, op_name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x, _)
            | Op::Transpose(x)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Reshape(x)
            | Op::MeanRows(x)
            | Op::Sum(x) => self.rg(*x),
            Op::LayerNorm { x, gamma, beta, .. } => self.rg(*x) || self.rg(*gamma) || self.rg(*beta),
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().any(|x| self.rg(*x)),
            Op::Kl { pred, .. } => self.rg(*pred),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_t")?;
        let (n, k2) = tb.dims2("matmul_t")?;
        if k != k2 {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), false, tb.data(), true, m, k, n, &mut out, false);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::Add(a, b), "add")
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, n) = tx.dims2("add_row")?;
        if tr.len() != n {
            return Err(mismatch("add_row", tx, tr));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(value, Op::AddRow(x, row), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu(v).0);
        self.push(value, Op::Gelu(x), "gelu")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        self.push(value, Op::Softmax(x, axis), "softmax")
    }

    /// Layer normalisation over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != n || tb.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.len() / n;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.push(value, Op::Transpose(x), "transpose")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::from_parts(vec![rows, w], data);
        self.push(value, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let (rows, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = self.value(v);
            let (r, c) = t.dims2("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", first, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        self.push(value, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    /// Entries `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let lead = tx.shape()[0];
        if start > end || end > lead {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside {lead} rows"),
            });
        }
        let stride = tx.len() / lead.max(1);
        let data = tx.data()[start * stride..end * stride].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::from_parts(shape, data);
        self.push(value, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] {
                return Err(mismatch("concat_rows", first, t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::from_parts(shape, data);
        self.push(value, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Mean over the rows of a matrix, giving a 1×n matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2("mean_rows")?;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&tx.data()[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push(Tensor::from_parts(vec![1, cols], out), Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Summed KL divergence between a predicted distribution and a constant
    /// target of the same shape. Both sides are floored at [`KL_EPS`] inside
    /// the logarithm, so identical inputs give exactly zero but near-zero
    /// cells are perturbed slightly.
    pub fn kl_div(&mut self, pred: Var, target: &Tensor, direction: KlDirection) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(mismatch("kl_div", tp, target));
        }
        let loss = kl_value(tp.data(), target.data(), direction);
        self.push(
            Tensor::scalar(loss),
            Op::Kl {
                pred,
                target: target.clone(),
                direction,
            },
            "kl_div",
        )
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("root must be a scalar, got shape {:?}", root_value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul")?;
                let (_, n) = tb.dims2("matmul")?;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), false, tb.data(), true, m, n, k, &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(ta.data(), true, g.data(), false, k, m, n, &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ with A m×k, B n×k
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul_t")?;
                let (n, _) = tb.dims2("matmul_t")?;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), false, tb.data(), false, m, n, k, &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(g.data(), true, ta.data(), false, n, m, k, &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*row) {
                    let tr = self.value(*row);
                    let n = tr.len();
                    let mut dr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_parts(tr.shape().to_vec(), dr));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| gv * gelu(*xv).1)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis, "softmax")?;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|k| g.data()[base + k * inner] * y.data()[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let p = base + k * inner;
                            d[p] = y.data()[p] * (g.data()[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let n = tg.len();
                let rows = xhat.len() / n;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            let gv = g.data()[r * n + j];
                            dg[j] += gv * xhat[r * n + j];
                            db[j] += gv;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(tg.shape().to_vec(), dg));
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::from_parts(bshape, db));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let dh = g.data()[r * n + j] * tg.data()[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let dh = g.data()[r * n + j] * tg.data()[j];
                            dx[r * n + j] = rstd[r] * (dh - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (rows, cols) = tx.dims2("slice_cols")?;
                let w = g.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![rows, cols], d));
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = g.dims2("concat_cols")?;
                let mut offset = 0;
                for &v in xs {
                    let w = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(vec![rows, w], d));
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let stride = tx.len() / tx.shape()[0].max(1);
                let mut d = vec![0.0; tx.len()];
                d[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let t = self.value(v);
                    if self.rg(v) {
                        let d = g.data()[offset..offset + t.len()].to_vec();
                        self.accumulate(grads, v, Tensor::from_parts(t.shape().to_vec(), d));
                    }
                    offset += t.len();
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (rows, cols) = tx.dims2("mean_rows")?;
                let scale = 1.0 / rows as f64;
                let d = (0..rows * cols).map(|i| g.data()[i % cols] * scale).collect();
                self.accumulate(grads, *x, Tensor::from_parts(vec![rows, cols], d));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Kl {
                pred,
                target,
                direction,
            } => {
                let tp = self.value(*pred);
                let scale = g.data()[0];
                let d = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &q)| scale * kl_grad(p, q, *direction))
                    .collect();
                self.accumulate(grads, *pred, Tensor::from_parts(tp.shape().to_vec(), d));
            }
        }
        Ok(())
    }
}

pub(crate) fn kl_value(pred: &[f64], target: &[f64], direction: KlDirection) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &q)| {
            let (lp, lq) = (p.max(KL_EPS).ln(), q.max(KL_EPS).ln());
            match direction {
                KlDirection::PredictedFirst => p * (lp - lq),
                KlDirection::TargetFirst => q * (lq - lp),
            }
        })
        .sum()
}

fn kl_grad(p: f64, q: f64, direction: KlDirection) -> f64 {
    match direction {
        KlDirection::PredictedFirst => {
            let base = p.max(KL_EPS).ln() - q.max(KL_EPS).ln();
            if p > KL_EPS {
                base + 1.0
            } else {
                base
            }
        }
        KlDirection::TargetFirst => {
            if p > KL_EPS {
                -q / p
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        // y = sum(x * x) -> dy/dx = 2x
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let w = g.param(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let y = g.matmul(c, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1e300));
        let err = g.scale(x, 1e300).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = [0.25, 0.25, 0.5, 0.0];
        assert_eq!(kl_value(&p, &p, KlDirection::PredictedFirst), 0.0);
        assert_eq!(kl_value(&p, &p, KlDirection::TargetFirst), 0.0);
    }
}
