use super::tensor::{gemm, Tensor};
use super::AutodiffError;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Mean(Var),
    SumSq(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations recorded in execution order.
///
/// Nodes are appended as ops run, so the tape is already topologically
/// sorted and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
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

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn rank_error(op: &'static str, t: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: t.shape().to_vec(), rhs: vec![] }
}

/// (outer, len, inner) decomposition of a rank ≤ 2 tensor along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1),
        (2, 0) => (1, shape[0], shape[1]),
        (2, 1) => (shape[0], shape[1], 1),
        _ => unreachable!("validated by caller"),
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(rank_error("transpose", t));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.record("transpose", value, Op::Transpose(a), &[a])
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tx.rank() != 2 || tr.rank() != 1 || tx.shape()[1] != tr.shape()[0] {
            return Err(mismatch(name, tx, tr));
        }
        let c = tr.len();
        let data = tx.data().iter().enumerate().map(|(i, v)| f(*v, tr.data()[i % c])).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.record(name, value, op, &[x, row])
    }

    /// `x[i, :] + row` for every row of a rank-2 `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_op("add_row", x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    /// `x[i, :] ⊙ row` for every row of a rank-2 `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_op("mul_row", x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())?;
        self.record("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        self.record("relu", value, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| gelu(*v)).collect())?;
        self.record("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.rank() == 0 || t.rank() > 2 || axis >= t.rank() {
            return Err(rank_error("softmax", t));
        }
        let (outer, len, inner) = axis_layout(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.record("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.rank() == 0 || t.rank() > 2 {
            return Err(rank_error("layer_norm", t));
        }
        let cols = t.cols();
        let mut out = t.data().to_vec();
        let mut rstds = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.record("layer_norm", value, Op::LayerNorm { x, rstd: rstds }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self.value(*xs.first().ok_or(AutodiffError::EmptyInput("concat"))?);
        let rank = first.rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(rank_error("concat", first));
        }
        for v in xs {
            let t = self.value(*v);
            let compatible = t.rank() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !compatible {
                return Err(mismatch("concat", first, t));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = xs.iter().map(|v| self.value(*v).shape()[axis]).sum();
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        if rank == 1 || axis == 0 {
            for v in xs {
                out.extend_from_slice(self.value(*v).data());
            }
        } else {
            for r in 0..shape[0] {
                for v in xs {
                    let t = self.value(*v);
                    let c = t.shape()[1];
                    out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.record("concat", value, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.rank() == 0 || t.rank() > 2 || axis >= t.rank() || start >= end || end > t.shape()[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let out = if t.rank() == 1 {
            t.data()[start..end].to_vec()
        } else if axis == 0 {
            let c = t.shape()[1];
            t.data()[start * c..end * c].to_vec()
        } else {
            let c = t.shape()[1];
            t.data().chunks(c).flat_map(|row| row[start..end].iter().copied()).collect()
        };
        let value = Tensor::new(shape, out)?;
        self.record("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(rank_error("embedding_lookup", t));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding_lookup",
                lhs: t.shape().to_vec(),
                rhs: vec![*bad],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        self.record("embedding_lookup", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean over all elements; returns a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(AutodiffError::EmptyInput("mean"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum of squares over all elements; returns a scalar.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.record("sum_sq", Tensor::scalar(s), Op::SumSq(x), &[x])
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len() as f64;
        let d = self.sub(a, b)?;
        let s = self.sum_sq(d)?;
        self.scale(s, 1.0 / n)
    }

    /// `x·w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 || lt.rank() > 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let like = |v: Var, data: Vec<f64>| Tensor::new(shape_of(v), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, like(*a, out));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, like(*b, g.data().iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for r in g.data().chunks(c) {
                        for (acc, v) in d.iter_mut().zip(r) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, like(*row, d));
                }
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                let c = tr.len();
                if self.requires_grad(*x) {
                    let d = g.data().iter().enumerate().map(|(i, v)| v * tr.data()[i % c]).collect();
                    self.accumulate(grads, *x, like(*x, d));
                }
                if self.requires_grad(*row) {
                    let mut d = vec![0.0; c];
                    for (i, (gv, xv)) in g.data().iter().zip(tx.data()).enumerate() {
                        d[i % c] += gv * xv;
                    }
                    self.accumulate(grads, *row, like(*row, d));
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, like(*x, g.data().iter().map(|v| v * s).collect()));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_layout(y.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let gy = &g.data()[r * c..(r + 1) * c];
                    let yy = &y.data()[r * c..(r + 1) * c];
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[r * c + j] = rs * (gy[j] - mean_g - yy[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Concat { xs, axis } => {
                let rank = g.rank();
                let mut offset = 0;
                for v in xs {
                    let width = self.value(*v).shape()[*axis];
                    if self.requires_grad(*v) {
                        let part = if rank == 1 || *axis == 0 {
                            let inner = if rank == 2 { g.shape()[1] } else { 1 };
                            g.data()[offset * inner..(offset + width) * inner].to_vec()
                        } else {
                            let c = g.shape()[1];
                            g.data().chunks(c).flat_map(|row| row[offset..offset + width].iter().copied()).collect()
                        };
                        self.accumulate(grads, *v, like(*v, part));
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.value(*x);
                let mut d = vec![0.0; src.len()];
                if src.rank() == 1 {
                    d[*start..*start + g.len()].copy_from_slice(g.data());
                } else if *axis == 0 {
                    let c = src.shape()[1];
                    d[start * c..start * c + g.len()].copy_from_slice(g.data());
                } else {
                    let c = src.shape()[1];
                    let w = g.shape()[1];
                    for r in 0..src.shape()[0] {
                        d[r * c + start..r * c + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Embedding { table, ids } => {
                let dim = self.value(*table).shape()[1];
                let mut d = vec![0.0; self.value(*table).len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        d[id * dim + j] += g.data()[row * dim + j];
                    }
                }
                self.accumulate(grads, *table, like(*table, d));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, like(*x, vec![g.item() / n as f64; n]));
            }
            Op::SumSq(x) => {
                let s = 2.0 * g.item();
                self.accumulate(grads, *x, like(*x, self.value(*x).data().iter().map(|v| s * v).collect()));
            }
        }
    }
}
