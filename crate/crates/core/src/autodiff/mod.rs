//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered with
//! [`Tape::param`] (differentiable) or [`Tape::constant`]; every primitive
//! appends one node holding its forward value. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that depends on a
//! differentiable leaf.
//!
//! Shape rules per primitive:
//!
//! * `matmul`: `[m, k] x [k, n] -> [m, n]`.
//! * `add`: equal shapes, or a bias whose length equals the last dim of the
//!   left operand (broadcast over rows).
//! * `sub`, `mul`: equal shapes.
//! * `scale_rows`: `[m, n]` times a per-row factor of length `m`.
//! * `softmax`, `l2_normalize`, `concat`: along an explicit axis.
//! * `cross_entropy`: logits `[b, v]` (or `[v]`), one label and weight per
//!   row; returns the weighted sum of per-row losses.

mod lstm;
mod optim;
mod tensor;

pub use lstm::{lstm_step, masked_update, LstmVars};
pub use optim::{adam_step, clip_weights, decayed_lr, sgd_momentum_step, OptimizerHyper, OptimizerState};
pub use tensor::Tensor;

use std::sync::atomic::{AtomicU64, Ordering};
use tensor::axis_split;

/// Denominator floor for the signed square root derivative at zero.
pub const SIGNED_SQRT_FLOOR: f64 = 1e-6;
/// Added to the norm before dividing in `l2_normalize`.
pub const L2_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable is not on this tape")]
    ForeignVar,
    #[error("{op}: forward produced a non-finite value")]
    NonFinite { op: &'static str },
}

type Result<T> = std::result::Result<T, AutodiffError>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    /// Position of the node on its tape.
    pub fn id(&self) -> usize {
        self.index
    }
}

/// Primitive kinds accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    ScaleRows,
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    Softmax { axis: usize },
    SignedSqrt,
    L2Normalize { axis: usize },
    Concat { axis: usize },
    Log,
    CrossEntropy { labels: Vec<usize>, weights: Vec<f64> },
    Mean,
    Sum,
    Clamp { lo: f64, hi: f64 },
    Reshape(Vec<usize>),
    RepeatRows(usize),
    SegmentSum(usize),
    SliceCols { start: usize, len: usize },
    Gather(Vec<usize>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    SignedSqrt(usize),
    L2Normalize {
        x: usize,
        axis: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Log(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Mean(usize),
    Sum(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Reshape(usize),
    RepeatRows {
        x: usize,
        times: usize,
    },
    SegmentSum {
        x: usize,
        group: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Softmax { x, .. }
            | Op::SignedSqrt(x)
            | Op::L2Normalize { x, .. }
            | Op::Log(x)
            | Op::CrossEntropy { logits: x, .. }
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Clamp { x, .. }
            | Op::Reshape(x)
            | Op::RepeatRows { x, .. }
            | Op::SegmentSum { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Gather { table: x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the root does not depend on it
    /// through differentiable paths.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index)?.as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index }
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(&self.nodes[var.index].value)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Applies `prim` to `operands`, dispatching to the typed methods.
    pub fn apply(&mut self, prim: Primitive, operands: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::ScaleRows => 2,
            Primitive::Concat { .. } => operands.len().max(1),
            _ => 1,
        };
        if operands.len() != arity {
            return Err(AutodiffError::InvalidArgument {
                op: "apply",
                detail: format!("{prim:?} takes {arity} operands, got {}", operands.len()),
            });
        }
        let a = operands[0];
        match prim {
            Primitive::MatMul => self.matmul(a, operands[1]),
            Primitive::Add => self.add(a, operands[1]),
            Primitive::Sub => self.sub(a, operands[1]),
            Primitive::Mul => self.mul(a, operands[1]),
            Primitive::ScaleRows => self.scale_rows(a, operands[1]),
            Primitive::Scale(c) => self.scale(a, c),
            Primitive::Tanh => self.tanh(a),
            Primitive::Sigmoid => self.sigmoid(a),
            Primitive::Relu => self.relu(a),
            Primitive::Softmax { axis } => self.softmax(a, axis),
            Primitive::SignedSqrt => self.signed_sqrt(a),
            Primitive::L2Normalize { axis } => self.l2_normalize(a, axis),
            Primitive::Concat { axis } => self.concat(operands, axis),
            Primitive::Log => self.ln(a),
            Primitive::CrossEntropy { labels, weights } => self.cross_entropy(a, &labels, &weights),
            Primitive::Mean => self.mean(a),
            Primitive::Sum => self.sum(a),
            Primitive::Clamp { lo, hi } => self.clamp(a, lo, hi),
            Primitive::Reshape(shape) => self.reshape(a, shape),
            Primitive::RepeatRows(k) => self.repeat_rows(a, k),
            Primitive::SegmentSum(k) => self.segment_sum(a, k),
            Primitive::SliceCols { start, len } => self.slice_cols(a, start, len),
            Primitive::Gather(ids) => self.gather(a, &ids),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (m, k) = match ta.shape() {
            [m, k] => (*m, *k),
            _ => return Err(mismatch()),
        };
        let n = match tb.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(mismatch()),
        };
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.record("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a.index, b.index))
    }

    /// Elementwise sum; the right operand may also be a bias row broadcast
    /// over the leading dims of the left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() == tb.shape() {
            let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            return self.record("add", Tensor::new(ta.shape().to_vec(), out)?, Op::Add(a.index, b.index));
        }
        let cols = *ta.shape().last().unwrap();
        let bias_like = tb.numel() == cols && tb.shape().iter().rev().skip(1).all(|&d| d == 1);
        if !bias_like {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let shape = ta.shape().to_vec();
        self.record("add", Tensor::new(shape, out)?, Op::AddBias(a.index, b.index))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor, &Tensor)> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((ta, tb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("sub", a, b)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.record("sub", t, Op::Sub(a.index, b.index))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("mul", a, b)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.record("mul", t, Op::Mul(a.index, b.index))
    }

    /// Multiplies row `r` of a `[m, n]` tensor by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.check(x)?, self.check(s)?);
        let (m, n) = match tx.shape() {
            [m, n] if ts.numel() == *m => (*m, *n),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "scale_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: ts.shape().to_vec(),
                })
            }
        };
        let mut out = tx.data().to_vec();
        for (row, f) in out.chunks_mut(n).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.record("scale_rows", t, Op::ScaleRows(x.index, s.index))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.check(x)?;
        let out = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.record("scale", t, Op::Scale(x.index, c))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.check(x)?;
        let out = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.record(name, t, op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x.index))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.index))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x.index))
    }

    /// `x -> sign(x) * sqrt(|x|)`.
    pub fn signed_sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("signed_sqrt", x, |v| v.signum() * v.abs().sqrt(), Op::SignedSqrt(x.index))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        if let Some(bad) = tx.data().iter().find(|&&v| v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        self.unary("log", x, f64::ln, Op::Log(x.index))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x: x.index, lo, hi })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let (outer, len, inner) = axis_of("softmax", tx, axis)?;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.record("softmax", t, Op::Softmax { x: x.index, axis })
    }

    /// Divides each slice along `axis` by its Euclidean norm plus [`L2_NORM_EPS`].
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let (outer, len, inner) = axis_of("l2_normalize", tx, axis)?;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let norm = (0..len).map(|j| src[at(j)].powi(2)).sum::<f64>().sqrt();
                let d = norm + L2_NORM_EPS;
                for j in 0..len {
                    out[at(j)] = src[at(j)] / d;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.record("l2_normalize", t, Op::L2Normalize { x: x.index, axis })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                detail: "no operands".into(),
            });
        }
        let first = self.check(xs[0])?.shape().to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.check(v)?.shape();
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.index].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let ids = xs.iter().map(|v| v.index).collect();
        self.record("concat", t, Op::Concat { xs: ids, axis })
    }

    /// Weighted sum over rows of softmax cross-entropy between `logits` and
    /// integer `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let tl = self.check(logits)?;
        let (rows, classes) = tl.dims2().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "cross_entropy",
            detail: format!("logits must be rank 1 or 2, got {:?}", tl.shape()),
        })?;
        if labels.len() != rows || weights.len() != rows {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                detail: format!("{rows} rows but {} labels and {} weights", labels.len(), weights.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for r in 0..rows {
            let z = &tl.data()[r * classes..(r + 1) * classes];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(z) {
                *p = (v - lse).exp();
            }
            loss += weights[r] * (lse - z[labels[r]]);
        }
        let op = Op::CrossEntropy {
            logits: logits.index,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        self.record("cross_entropy", Tensor::scalar(loss), op)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let m = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.record("mean", Tensor::scalar(m), Op::Mean(x.index))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.check(x)?;
        let s = tx.data().iter().sum::<f64>();
        self.record("sum", Tensor::scalar(s), Op::Sum(x.index))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.check(x)?.clone().reshaped(shape)?;
        self.record("reshape", t, Op::Reshape(x.index))
    }

    /// Repeats every row of a `[m, n]` tensor `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let (m, n) = rank2("repeat_rows", tx)?;
        if times == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "repeat_rows",
                detail: "times must be positive".into(),
            });
        }
        let mut out = Vec::with_capacity(m * times * n);
        for r in 0..m {
            for _ in 0..times {
                out.extend_from_slice(tx.row(r));
            }
        }
        let t = Tensor::new(vec![m * times, n], out)?;
        self.record("repeat_rows", t, Op::RepeatRows { x: x.index, times })
    }

    /// Sums consecutive groups of `group` rows: `[m * group, n] -> [m, n]`.
    pub fn segment_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let (rows, n) = rank2("segment_sum", tx)?;
        if group == 0 || rows % group != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_sum",
                detail: format!("{rows} rows not divisible into groups of {group}"),
            });
        }
        let m = rows / group;
        let mut out = vec![0.0; m * n];
        for r in 0..rows {
            let dst = &mut out[(r / group) * n..(r / group + 1) * n];
            for (o, v) in dst.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.record("segment_sum", t, Op::SegmentSum { x: x.index, group })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.check(x)?;
        let (m, n) = rank2("slice_cols", tx)?;
        if len == 0 || start + len > n {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                detail: format!("columns {start}..{} out of range for width {n}", start + len),
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        self.record("slice_cols", t, Op::SliceCols { x: x.index, start })
    }

    /// Row lookup into a `[v, d]` table: `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.check(table)?;
        let (v, d) = rank2("gather", tt)?;
        if ids.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                detail: "no ids".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                detail: format!("id {bad} out of range for table of {v} rows"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.record(
            "gather",
            t,
            Op::Gather {
                table: table.index,
                ids: ids.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.check(root)?;
        if !root_value.is_scalar() {
            return Err(AutodiffError::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.index + 1);
        grads.resize_with(root.index + 1, || None);
        if self.nodes[root.index].requires_grad {
            grads[root.index] = Some(vec![1.0]);
        }
        for idx in (0..=root.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    let da = acc(grads, *a, m * k);
                    // da[m,k] += g[m,n] * b^T
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let dai = &mut da[i * k..(i + 1) * k];
                        for (p, d) in dai.iter_mut().enumerate() {
                            let bp = &tb.data()[p * n..(p + 1) * n];
                            *d += dot(gi, bp);
                        }
                    }
                }
                if wants(*b) {
                    let db = acc(grads, *b, k * n);
                    // db[k,n] += a^T * g
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let ai = &ta.data()[i * k..(i + 1) * k];
                        for (p, &av) in ai.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let dbp = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in dbp.iter_mut().zip(gi) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &i in &[*a, *b] {
                    if wants(i) {
                        add_into(acc(grads, i, g.len()), g);
                    }
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let cols = val(*b).numel();
                    let db = acc(grads, *b, cols);
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let db = acc(grads, *b, g.len());
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let da = acc(grads, *a, g.len());
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(tb) {
                        *d += gv * bv;
                    }
                }
                if wants(*b) {
                    let db = acc(grads, *b, g.len());
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ta) {
                        *d += gv * av;
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let n = tx.shape()[1];
                if wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((drow, grow), f) in dx.chunks_mut(n).zip(g.chunks(n)).zip(ts.data()) {
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv * f;
                        }
                    }
                }
                if wants(*s) {
                    let ds = acc(grads, *s, ts.numel());
                    for (r, (grow, xrow)) in g.chunks(n).zip(tx.data().chunks(n)).enumerate() {
                        ds[r] += dot(grow, xrow);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xs = val(*x).data();
                    let dx = acc(grads, *x, g.len());
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis).unwrap();
                    let dx = acc(grads, *x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::SignedSqrt(x) => {
                if wants(*x) {
                    let xs = val(*x).data();
                    let dx = acc(grads, *x, g.len());
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        *d += gv / (2.0 * xv.abs().sqrt().max(SIGNED_SQRT_FLOOR));
                    }
                }
            }
            Op::L2Normalize { x, axis } => {
                if wants(*x) {
                    let xs = val(*x).data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis).unwrap();
                    let dx = acc(grads, *x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let norm = (0..len).map(|j| xs[at(j)].powi(2)).sum::<f64>().sqrt();
                            let d = norm + L2_NORM_EPS;
                            let gx: f64 = (0..len).map(|j| g[at(j)] * xs[at(j)]).sum();
                            let coef = if norm > 0.0 { gx / (d * d * norm) } else { 0.0 };
                            for j in 0..len {
                                dx[at(j)] += g[at(j)] / d - xs[at(j)] * coef;
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &xi in xs {
                    let chunk = val(xi).shape()[*axis] * inner;
                    if wants(xi) {
                        let dx = acc(grads, xi, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            add_into(&mut dx[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xs = val(*x).data();
                    let dx = acc(grads, *x, g.len());
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        *d += gv / xv;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let classes = probs.len() / labels.len();
                    let dz = acc(grads, *logits, probs.len());
                    for (r, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        let row = &mut dz[r * classes..(r + 1) * classes];
                        for (d, p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d += scale * p;
                        }
                        row[label] -= scale;
                    }
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).numel();
                    let gv = g[0] / n as f64;
                    acc(grads, *x, n).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = val(*x).numel();
                    acc(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if wants(*x) {
                    let xs = val(*x).data();
                    let dx = acc(grads, *x, g.len());
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xs) {
                        if *xv >= *lo && *xv <= *hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
            }
            Op::RepeatRows { x, times } => {
                if wants(*x) {
                    let tx = val(*x);
                    let n = tx.shape()[1];
                    let dx = acc(grads, *x, tx.numel());
                    for (r, grow) in g.chunks(n).enumerate() {
                        let dst = r / times;
                        add_into(&mut dx[dst * n..(dst + 1) * n], grow);
                    }
                }
            }
            Op::SegmentSum { x, group } => {
                if wants(*x) {
                    let tx = val(*x);
                    let n = tx.shape()[1];
                    let dx = acc(grads, *x, tx.numel());
                    for (r, drow) in dx.chunks_mut(n).enumerate() {
                        let src = r / group;
                        add_into(drow, &g[src * n..(src + 1) * n]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let tx = val(*x);
                    let n = tx.shape()[1];
                    let len = node.value.shape()[1];
                    let dx = acc(grads, *x, tx.numel());
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let tt = val(*table);
                    let d = tt.shape()[1];
                    let dt = acc(grads, *table, tt.numel());
                    for (grow, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut dt[id * d..(id + 1) * d], grow);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn axis_of(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    axis_split(t.shape(), axis).ok_or_else(|| AutodiffError::InvalidArgument {
        op,
        detail: format!("axis {axis} out of range for {:?}", t.shape()),
    })
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(AutodiffError::InvalidArgument {
            op,
            detail: format!("expected rank 2, got {s:?}"),
        }),
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
