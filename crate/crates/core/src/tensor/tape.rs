//! Wengert tape: every primitive appends a node holding its value, and
//! `backward` replays the nodes in reverse to accumulate vector-Jacobian
//! products.

use std::sync::Arc;

use super::kernels::{gemm_acc, Layout};
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Sentinel in gather index maps meaning "write zero" (padding).
pub const PAD: u32 = u32::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Glu(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Arc<[u32]>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GroupMeanRows(Var, usize),
    Dropout(Var, Vec<f64>),
    /// Scalar output whose gradient with respect to the input is precomputed.
    Fixed(Var, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Glu(..) => "glu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather(..) => "gather",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::GroupMeanRows(..) => "group_mean_rows",
            Op::Dropout(..) => "dropout",
            Op::Fixed(..) => "fixed_grad",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Glu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::GroupMeanRows(a, _)
            | Op::Dropout(a, _)
            | Op::Fixed(a, _) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    score_entries: u64,
}

/// Gradients produced by [`Tape::backward`], one slot per tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if no path reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Raw gradient data of `v`, if any path reached it.
    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Attention score-matrix entries recorded so far.
    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }

    pub fn record_score_entries(&mut self, n: u64) {
        self.score_entries += n;
    }

    /// Leaf that participates in differentiation.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(node))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), t)
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.numel() != tx.cols() {
            return Err(Error::Shape {
                op,
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_check("add_row", x, row)?;
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        let mut t = tx.clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % c];
        }
        self.push(Op::AddRow(x, row), t)
    }

    /// Multiplies every row of `x` element-wise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_check("mul_row", x, row)?;
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        let mut t = tx.clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= tr.data()[i % c];
        }
        self.push(Op::MulRow(x, row), t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), t)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), t)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a · b` of an `m×k` and a `k×n` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
        );
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?)
    }

    /// `a · bᵀ` for an `m×k` matrix `a` and an `n×k` matrix `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            &mut out,
        );
        self.push(Op::MatMulNt(a, b), Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(x), Tensor::new(vec![c, r], out)?)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut t = tx.clone();
        if c > 0 {
            for (src, dst) in tx.data().chunks(c).zip(t.data_mut().chunks_mut(c)) {
                softmax_row(src, dst);
            }
        }
        self.push(Op::Softmax(x), t)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut t = tx.clone();
        if c > 0 {
            for row in t.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        self.push(Op::LogSoftmax(x), t)
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.row_check("layer_norm", x, gamma)?;
        self.row_check("layer_norm", x, beta)?;
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 {
            return contract("layer_norm needs d >= 1");
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = tx.clone();
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Silu(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), t)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), t)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), t)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), t)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), t)
    }

    /// Gated linear unit over the last axis: `a ⊙ σ(b)` for `[a | b] = x`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c2 = tx.cols();
        if !c2.is_multiple_of(2) {
            return contract(format!("glu needs an even channel count, got {c2}"));
        }
        let c = c2 / 2;
        let rows = tx.rows();
        let mut out = Vec::with_capacity(rows * c);
        for row in tx.data().chunks(c2) {
            for j in 0..c {
                out.push(row[j] * sigmoid(row[c + j]));
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = c;
        self.push(Op::Glu(x), Tensor::new(shape, out)?)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return contract("mean of empty tensor");
        }
        let m = t.sum() / t.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == PAD {
                out.push(0.0);
            } else {
                match src.get(i as usize) {
                    Some(&v) => out.push(v),
                    None => return contract(format!("gather index {i} out of range")),
                }
            }
        }
        self.push(Op::Gather(x, index), Tensor::new(shape, out)?)
    }

    /// Rows `start..start + len` of a matrix (or leading-axis slice).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.is_empty() || start + len > s[0] {
            return contract(format!("slice_rows {start}..{} of {:?}", start + len, s));
        }
        let inner: usize = s[1..].iter().product();
        let data = tx.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        self.push(Op::SliceRows(x, start), Tensor::new(shape, data)?)
    }

    /// Columns `start..start + len` of a 2-D matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start + len > c {
            return contract(format!("slice_cols {start}..{} of {c}", start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols(x, start), Tensor::new(vec![r, len], out)?)
    }

    /// Stacks matrices with equal trailing shape along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows of nothing");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(shape, data)?)
    }

    /// Joins 2-D matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_cols of nothing");
        };
        let (r, _) = self.matrix_dims("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_cols", p)?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr, pc],
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                out.extend_from_slice(t.row(i));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![r, total], out)?,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), t)
    }

    /// Averages consecutive groups of `group` rows: `[R×C] → [R/group × C]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("group_mean_rows", x)?;
        if group == 0 || r % group != 0 {
            return contract(format!("{r} rows not divisible into groups of {group}"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; (r / group) * c];
        for i in 0..r {
            let o = (i / group) * c;
            for j in 0..c {
                out[o + j] += src[i * c + j];
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(
            Op::GroupMeanRows(x, group),
            Tensor::new(vec![r / group, c], out)?,
        )
    }

    /// Inverted dropout with a caller-supplied keep mask (already scaled).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut t = tx.clone();
        t.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, m)| *v *= m);
        self.push(Op::Dropout(x, mask), t)
    }

    /// Records a scalar `value` of `x` whose gradient `∂value/∂x` is already known.
    pub fn fixed_grad(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::Shape {
                op: "fixed_grad",
                lhs: self.shape(x).to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                op: "fixed_grad",
                node: self.nodes.len(),
            });
        }
        self.push(Op::Fixed(x, grad), Tensor::scalar(value))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, r) => {
                let c = val(*r).len();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*r, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % c] += gv;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x), val(*r));
                let c = vr.len();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vr[i % c];
                    }
                });
                acc(*r, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % c] += gv * vx[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |s| {
                    gemm_acc(m, n, k, g, Layout::Normal, vb, Layout::Transposed, s)
                });
                acc(*b, &mut |s| {
                    gemm_acc(k, m, n, va, Layout::Transposed, g, Layout::Normal, s)
                });
            }
            Op::MatMulNt(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                // out = A·Bᵀ: dA = G · B, dB = Gᵀ · A
                acc(*a, &mut |s| {
                    gemm_acc(m, n, k, g, Layout::Normal, vb, Layout::Normal, s)
                });
                acc(*b, &mut |s| {
                    gemm_acc(n, m, k, g, Layout::Transposed, va, Layout::Normal, s)
                });
            }
            Op::Transpose(x) => {
                let s0 = self.nodes[x.0].value.shape();
                let (r, c) = (s0[0], s0[1]);
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            srow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gm = val(*gamma);
                acc(*beta, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % d] += gv;
                    }
                });
                acc(*gamma, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % d] += gv * xhat[i];
                    }
                });
                if wants(*x) {
                    acc(*x, &mut |s| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let o = r * d;
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for j in 0..d {
                                let gh = g[o + j] * gm[j];
                                mean_g += gh;
                                mean_gx += gh * xhat[o + j];
                            }
                            mean_g /= d as f64;
                            mean_gx /= d as f64;
                            for j in 0..d {
                                let gh = g[o + j] * gm[j];
                                s[o + j] += is * (gh - mean_g - xhat[o + j] * mean_gx);
                            }
                        }
                    });
                }
            }
            Op::Silu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(vx[i]);
                        s[i] += g[i] * (sg + vx[i] * sg * (1.0 - sg));
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if vx[i] > 0.0 {
                            s[i] += g[i];
                        } else if vx[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * vx[i] * g[i];
                    }
                });
            }
            Op::Glu(x) => {
                let vx = val(*x);
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let o = r * 2 * c;
                        for j in 0..c {
                            let a = vx[o + j];
                            let sg = sigmoid(vx[o + c + j]);
                            s[o + j] += grow[j] * sg;
                            s[o + c + j] += grow[j] * a * sg * (1.0 - sg);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Gather(x, index) => {
                acc(*x, &mut |s| {
                    for (&i, gv) in index.iter().zip(g) {
                        if i != PAD {
                            s[i as usize] += gv;
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let s0 = self.nodes[x.0].value.shape();
                let inner: usize = s0[1..].iter().product();
                let off = start * inner;
                acc(*x, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[off + i] += gv;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let c = self.nodes[x.0].value.cols();
                let len = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            s[r * c + start + j] += grow[j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(*p, &mut |s| {
                        for i in 0..n {
                            s[i] += g[off + i];
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    acc(*p, &mut |s| {
                        for (r, srow) in s.chunks_mut(pc.max(1)).enumerate() {
                            for j in 0..pc {
                                srow[j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::GroupMeanRows(x, group) => {
                let c = node.value.cols();
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |s| {
                    for (i, srow) in s.chunks_mut(c).enumerate() {
                        let o = (i / group) * c;
                        for j in 0..c {
                            srow[j] += g[o + j] * inv;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Fixed(x, jac) => {
                let jd = jac.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * jd[i];
                    }
                });
            }
        }
    }
}
