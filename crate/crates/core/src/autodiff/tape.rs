//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value plus whatever the
//! backward rule needs. `backward` consumes the tape and walks it in exact
//! reverse order. Nodes that do not depend on any parameter leaf are marked
//! `requires_grad = false` and skipped entirely.

use std::collections::HashMap;

use super::tensor::{dot, Tensor};
use super::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_events: usize,
}

/// Gradients of a scalar loss with respect to every parameter leaf it reaches.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of probabilities clamped at [`PROB_FLOOR`] by `nll` so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Frozen leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(self.mismatch("add_row", x, row));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var, TensorError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let start = data.len();
            let mut z = 0.0;
            for &v in row {
                let e = ((v - max) / temperature).exp();
                z += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= z;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, temperature }, rg))
    }

    /// Per-row normalization to zero mean, unit variance, then `gain ⊙ · + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let n = self.value(x).cols();
        for p in [gain, shift] {
            let pv = self.value(p);
            if pv.numel() != n {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(shift));
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, shift]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm. A zero row is a degenerate input.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for (r, row) in xv.data().chunks(n).enumerate() {
            let norm = dot(row, row).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(TensorError::Degenerate(format!("row {r} has norm {norm}")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// `out[r] = a[r] · b[r]`, shape `m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        let data: Vec<f64> = av
            .data()
            .chunks(n)
            .zip(bv.data().chunks(n))
            .map(|(x, y)| dot(x, y))
            .collect();
        let value = Tensor::matrix(data.len(), 1, data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(TensorError::Index(format!(
                "row range {start}..{end} out of bounds for {:?}",
                xv.shape()
            )));
        }
        let n = xv.cols();
        let value = Tensor::matrix(end - start, n, xv.data()[start * n..end * n].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.cols();
        if start >= end || end > n {
            return Err(TensorError::Index(format!(
                "column range {start}..{end} out of bounds for {:?}",
                xv.shape()
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(xv.rows() * w);
        for row in xv.data().chunks(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::matrix(xv.rows(), w, data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.cols();
        if index.is_empty() {
            return Err(TensorError::Index("gather_rows with empty index".into()));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(TensorError::Index(format!(
                "gather index {bad} out of bounds for {:?}",
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(xv.row_slice(i));
        }
        let value = Tensor::matrix(index.len(), n, data);
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Index("concat of zero tensors".into()))?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, n, data);
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Index("concat of zero tensors".into()))?;
        let m = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(m, total, data);
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Mean over rows of `-ln p[r, labels[r]]`, with `p` clamped at [`PROB_FLOOR`].
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let pv = self.value(probs);
        if pv.rows() != labels.len() {
            return Err(TensorError::Index(format!(
                "{} labels for {} probability rows",
                labels.len(),
                pv.rows()
            )));
        }
        let n = pv.cols();
        let mut total = 0.0;
        let mut clamped = 0;
        for (r, &l) in labels.iter().enumerate() {
            if l >= n {
                return Err(TensorError::Index(format!("label {l} with {n} classes")));
            }
            let p = pv.get(r, l);
            if p < PROB_FLOOR {
                clamped += 1;
            }
            total -= p.max(PROB_FLOOR).ln();
        }
        if clamped > 0 {
            log::warn!("{clamped} ground-truth probabilities clamped at {PROB_FLOOR}");
        }
        self.clamp_events += clamped;
        let value = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            value,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes;
        let mut adj: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            adj[loss.0] = Some(Tensor::new(loss_shape, vec![1.0])?);
        }

        fn accumulate(adj: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    out.grads.insert(Var(i), g);
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut adj, &nodes, *a, g.matmul_t(val(*b)));
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut adj, &nodes, *b, val(*a).t_matmul(&g));
                    }
                }
                Op::Transpose(a) => accumulate(&mut adj, &nodes, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut adj, &nodes, *b, g.clone());
                    accumulate(&mut adj, &nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, &nodes, *b, g.map(|v| -v));
                    accumulate(&mut adj, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut adj, &nodes, *a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut adj, &nodes, *b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(x, row) => {
                    if nodes[row.0].requires_grad {
                        let n = g.cols();
                        let mut acc = vec![0.0; n];
                        for chunk in g.data().chunks(n) {
                            for (a, v) in acc.iter_mut().zip(chunk) {
                                *a += v;
                            }
                        }
                        let shape = val(*row).shape().to_vec();
                        accumulate(&mut adj, &nodes, *row, Tensor::new(shape, acc)?);
                    }
                    accumulate(&mut adj, &nodes, *x, g);
                }
                Op::Scale(x, c) => accumulate(&mut adj, &nodes, *x, g.map(|v| v * c)),
                Op::AddScalar(x) => accumulate(&mut adj, &nodes, *x, g),
                Op::Relu(x) => {
                    let gx = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj, &nodes, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv));
                    accumulate(&mut adj, &nodes, *x, gx);
                }
                Op::Softmax { x, temperature } => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut gx = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let s = dot(yr, gr);
                        gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s) / temperature));
                    }
                    let gx = Tensor::new(y.shape().to_vec(), gx)?;
                    accumulate(&mut adj, &nodes, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let n = g.cols();
                    let gv = val(*gain).data();
                    if nodes[gain.0].requires_grad || nodes[shift.0].requires_grad {
                        let mut dg = vec![0.0; n];
                        let mut db = vec![0.0; n];
                        for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * hr[j];
                                db[j] += gr[j];
                            }
                        }
                        let gs = val(*gain).shape().to_vec();
                        let ss = val(*shift).shape().to_vec();
                        accumulate(&mut adj, &nodes, *gain, Tensor::new(gs, dg)?);
                        accumulate(&mut adj, &nodes, *shift, Tensor::new(ss, db)?);
                    }
                    if nodes[x.0].requires_grad {
                        let mut dx = Vec::with_capacity(g.numel());
                        for ((gr, hr), &is) in g.data().chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                            let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / n as f64;
                            let mean_dh_h = dot(&dh, hr) / n as f64;
                            dx.extend(dh.iter().zip(hr).map(|(d, h)| is * (d - mean_dh - h * mean_dh_h)));
                        }
                        let shape = val(*x).shape().to_vec();
                        accumulate(&mut adj, &nodes, *x, Tensor::new(shape, dx)?);
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut gx = Vec::with_capacity(y.numel());
                    for ((yr, gr), &norm) in y.data().chunks(n).zip(g.data().chunks(n)).zip(norms) {
                        let s = dot(yr, gr);
                        gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * s) / norm));
                    }
                    let gx = Tensor::new(y.shape().to_vec(), gx)?;
                    accumulate(&mut adj, &nodes, *x, gx);
                }
                Op::RowDot(a, b) => {
                    let n = val(*a).cols();
                    let scale_rows = |src: &Tensor| {
                        let mut d = Vec::with_capacity(src.numel());
                        for (r, row) in src.data().chunks(n).enumerate() {
                            let gr = g.data()[r];
                            d.extend(row.iter().map(|v| v * gr));
                        }
                        Tensor::new(src.shape().to_vec(), d)
                    };
                    if nodes[a.0].requires_grad {
                        let ga = scale_rows(val(*b))?;
                        accumulate(&mut adj, &nodes, *a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let gb = scale_rows(val(*a))?;
                        accumulate(&mut adj, &nodes, *b, gb);
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let n = xv.cols();
                    let mut gx = vec![0.0; xv.numel()];
                    gx[start * n..start * n + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut adj, &nodes, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (n, w) = (xv.cols(), g.cols());
                    let mut gx = vec![0.0; xv.numel()];
                    for (r, gr) in g.data().chunks(w).enumerate() {
                        gx[r * n + start..r * n + start + w].copy_from_slice(gr);
                    }
                    accumulate(&mut adj, &nodes, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::GatherRows { x, index } => {
                    let xv = val(*x);
                    let n = xv.cols();
                    let mut gx = vec![0.0; xv.numel()];
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += g.data()[r * n + j];
                        }
                    }
                    accumulate(&mut adj, &nodes, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let len = pv.rows() * n;
                        if nodes[p.0].requires_grad {
                            let piece = g.data()[offset..offset + len].to_vec();
                            accumulate(&mut adj, &nodes, p, Tensor::new(pv.shape().to_vec(), piece)?);
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let w = pv.cols();
                        if nodes[p.0].requires_grad {
                            let mut piece = Vec::with_capacity(pv.numel());
                            for gr in g.data().chunks(total) {
                                piece.extend_from_slice(&gr[offset..offset + w]);
                            }
                            accumulate(&mut adj, &nodes, p, Tensor::new(pv.shape().to_vec(), piece)?);
                        }
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    accumulate(&mut adj, &nodes, *x, g.reshape(shape)?);
                }
                Op::Sum(x) => {
                    let xv = val(*x);
                    let gx = Tensor::new(xv.shape().to_vec(), vec![g.data()[0]; xv.numel()])?;
                    accumulate(&mut adj, &nodes, *x, gx);
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let v = g.data()[0] / xv.numel() as f64;
                    let gx = Tensor::new(xv.shape().to_vec(), vec![v; xv.numel()])?;
                    accumulate(&mut adj, &nodes, *x, gx);
                }
                Op::Nll { probs, labels } => {
                    let pv = val(*probs);
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut gp = vec![0.0; pv.numel()];
                    let n = pv.cols();
                    for (r, &l) in labels.iter().enumerate() {
                        let p = pv.get(r, l);
                        if p >= PROB_FLOOR {
                            gp[r * n + l] = -scale / p;
                        }
                    }
                    accumulate(&mut adj, &nodes, *probs, Tensor::new(pv.shape().to_vec(), gp)?);
                }
            }
        }
        Ok(out)
    }
}
