use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    AddRow(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// Leaf gradients accumulate across calls to [`Graph::backward`] until
/// [`Graph::zero_grad`] clears them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    /// Records an input tensor. Gradients are only collected for leaves
    /// created with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Result shape for a binary elementwise op with scalar broadcast.
    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.is_scalar() {
            Ok(sa.shape().to_vec())
        } else if sa.is_scalar() {
            Ok(sb.shape().to_vec())
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let len: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..len).map(|i| f(pick(da, i), pick(db, i))).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Gelu(a))
    }

    /// Adds the vector `b[n]` to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_row")?;
        if self.value(b).len() != n || self.value(b).rank() > 2 {
            return Err(self.mismatch("add_row", x, b));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bj) in row.iter_mut().zip(bias) {
                *v += bj;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(value, rg, Op::AddRow(x, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside 0..{n}"),
            });
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for row in src.chunks_exact(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or(TensorError::Rank {
            op: "softmax_lastdim",
            expected: 1,
            shape: Vec::new(),
        })?;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "softmax_lastdim",
                msg: "last dimension is empty".into(),
            });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    /// Normalizes each row over the last dimension (population variance),
    /// then applies `gain` and `bias` of length equal to that dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: Vec::new(),
        })?;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "last dimension is empty".into(),
            });
        }
        if self.value(gain).len() != n {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).len() != n {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.len() / n;
        let mut normed = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                normed.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means of `x[m×n]`, shape `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mean_rows")?;
        let mut data = vec![0.0; n];
        for row in self.value(x).data().chunks_exact(n) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let value = Tensor::new(vec![1, n], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::MeanRows(x)))
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("mse_loss", pred, target));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1) as f64;
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Mse(pred, target)))
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// a gradient. Calling this twice without [`Graph::zero_grad`] adds the
    /// second pass on top of the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                            *a += d;
                        }
                    }
                    None => {
                        node.grad =
                            Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches leaf shape"))
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = dims(val(a));
                let (_, n) = dims(val(b));
                if wants(a) {
                    accumulate(grads, a, kernels::matmul_nt(&g, val(b).data(), m, n, k));
                }
                if wants(b) {
                    accumulate(grads, b, kernels::matmul_tn(val(a).data(), &g, m, k, n));
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, reduce_broadcast(&g, val(a).len()));
                }
                if wants(b) {
                    accumulate(grads, b, reduce_broadcast(&g, val(b).len()));
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, reduce_broadcast(&g, val(a).len()));
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, b, reduce_broadcast(&neg, val(b).len()));
                }
            }
            &Op::Mul(a, b) => {
                let (da, db) = (val(a).data(), val(b).data());
                let pick = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                if wants(a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * pick(db, j)).collect();
                    accumulate(grads, a, reduce_broadcast(&full, da.len()));
                }
                if wants(b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * pick(da, j)).collect();
                    accumulate(grads, b, reduce_broadcast(&full, db.len()));
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => accumulate(grads, a, g),
            &Op::Scale(a, c) => accumulate(grads, a, g.iter().map(|v| v * c).collect()),
            &Op::Relu(a) => {
                let d = val(a)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(x, gj)| if *x > 0.0 { *gj } else { 0.0 })
                    .collect();
                accumulate(grads, a, d);
            }
            &Op::Gelu(a) => {
                let d = val(a).data().iter().zip(&g).map(|(x, gj)| gj * gelu_grad(*x)).collect();
                accumulate(grads, a, d);
            }
            &Op::AddRow(x, b) => {
                let n = val(b).len();
                if wants(b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, b, db);
                }
                if wants(x) {
                    accumulate(grads, x, g);
                }
            }
            &Op::Transpose(x) => {
                // g has the transposed shape [c×r]
                let (r, c) = dims(val(x));
                accumulate(grads, x, kernels::transpose(&g, c, r));
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = dims(val(x));
                let w = g.len() / m.max(1);
                let mut dx = vec![0.0; m * n];
                for (i, row) in g.chunks_exact(w).enumerate() {
                    dx[i * n + start..i * n + start + w].copy_from_slice(row);
                }
                accumulate(grads, x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = dims(val(p));
                    if wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for row in g.chunks_exact(total) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("softmax rank >= 1");
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yj, gj)| yj * (gj - dot)));
                }
                accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = val(gain).len();
                let gv = val(gain).data();
                if wants(gain) {
                    let mut dg = vec![0.0; n];
                    for (hr, gr) in normed.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += hr[j] * gr[j];
                        }
                    }
                    accumulate(grads, gain, dg);
                }
                if wants(bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks_exact(n) {
                        for (acc, v) in db.iter_mut().zip(gr) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, bias, db);
                }
                if wants(x) {
                    let nf = n as f64;
                    let mut dx = Vec::with_capacity(g.len());
                    for ((hr, gr), is) in normed.chunks_exact(n).zip(g.chunks_exact(n)).zip(inv_std) {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| is / nf * (nf * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::Sum(x) => {
                let len = val(x).len();
                accumulate(grads, x, vec![g[0]; len]);
            }
            &Op::MeanRows(x) => {
                let (m, _) = dims(val(x));
                let scale = 1.0 / m as f64;
                let row: Vec<f64> = g.iter().map(|v| v * scale).collect();
                accumulate(grads, x, row.repeat(m));
            }
            &Op::Mse(p, t) => {
                let (pd, td) = (val(p).data(), val(t).data());
                let k = 2.0 * g[0] / pd.len().max(1) as f64;
                let d: Vec<f64> = pd.iter().zip(td).map(|(a, b)| k * (a - b)).collect();
                if wants(t) {
                    accumulate(grads, t, d.iter().map(|v| -v).collect());
                }
                if wants(p) {
                    accumulate(grads, p, d);
                }
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2("backward").expect("rank checked in forward")
}

fn reduce_broadcast(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(&d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}
