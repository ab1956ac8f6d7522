//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] walks it once from the end.
//!
//! Binary elementwise ops broadcast the right operand only: its shape must
//! equal a trailing suffix of the left operand's shape (a rank-0 right
//! operand broadcasts against anything). The result takes the left shape.

mod conv;
mod lstm;
mod norm;

pub use conv::{conv1d, conv1d_out_len};
pub use norm::BatchStats;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Softplus,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Log { x: Var, eps: f64 },
    LogFloor { x: Var, floor: f64 },
    Scale { x: Var, factor: f64 },
    Offset { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    ReverseTime { x: Var },
    MatMul { a: Var, b: Var },
    Softmax { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Conv1d(conv::Conv1dRecord),
    BatchNorm(norm::BatchNormRecord),
    Lstm(Box<lstm::LstmRecord>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-writer; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, materialising zeros for unreached leaves.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable input whose gradient [`Graph::backward`] reports.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_suffix(kind_name(kind), ta.shape(), tb.shape())?;
        let nb = tb.numel();
        let bd = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Softplus => softplus,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Square => |v| v * v,
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    /// `ln(x + eps)`; `eps` must be positive.
    pub fn log(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("log: stabilizer must be positive, got {eps}")));
        }
        let value = self.value(x).map(|v| (v + eps).ln());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Log { x, eps }, rg))
    }

    /// `ln(max(x, floor))`; the gradient is zero below the floor.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        if !(floor > 0.0) {
            return Err(Error::invalid(format!("log: stabilizer must be positive, got {floor}")));
        }
        let value = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogFloor { x, floor }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let value = self.value(x).map(|v| v + offset);
        let rg = self.rg(x);
        self.push(value, Op::Offset { x }, rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    // ── Structural ───────────────────────────────────────────────────

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() {
                return Err(Error::Rank {
                    op: "concat",
                    expected: base.len(),
                    got: s.len(),
                });
            }
            for (ax, (&x, &y)) in s.iter().zip(&base).enumerate() {
                if ax != axis && x != y {
                    return Err(Error::shape("concat", format!("axis {ax}"), y, x));
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `out[b,t,c] = x[b,T-1-t,c]`
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.expect_rank("reverse_time", 3)?;
        let value = reverse_time(t);
        let rg = self.rg(x);
        Ok(self.push(value, Op::ReverseTime { x }, rg))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t
            .shape()
            .last()
            .ok_or(Error::AxisOutOfRange { op: "softmax", axis: 0, rank: 0 })?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Width-2, stride-2 max pooling over time; a trailing odd step is dropped.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.expect_rank("max_pool_time", 3)?;
        let (b, len, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let out_len = len / 2;
        let d = t.data();
        let mut out = Vec::with_capacity(b * out_len * c);
        let mut argmax = Vec::with_capacity(b * out_len * c);
        for bi in 0..b {
            for ti in 0..out_len {
                for ci in 0..c {
                    let i0 = (bi * len + 2 * ti) * c + ci;
                    let i1 = i0 + c;
                    let pick = if d[i1] > d[i0] { i1 } else { i0 };
                    out.push(d[pick]);
                    argmax.push(pick);
                }
            }
        }
        let value = Tensor::new([b, out_len, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Max over the time axis: `(B,T,C) -> (B,C)`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.expect_rank("global_max_pool", 3)?;
        let (b, len, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if len == 0 {
            return Err(Error::shape("global_max_pool", "time", 1, 0));
        }
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0; b * c];
        for bi in 0..b {
            for ti in 0..len {
                for ci in 0..c {
                    let i = (bi * len + ti) * c + ci;
                    if d[i] > out[bi * c + ci] {
                        out[bi * c + ci] = d[i];
                        argmax[bi * c + ci] = i;
                    }
                }
            }
        }
        let value = Tensor::new([b, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalMaxPool { x, argmax }, rg))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss.
    ///
    /// Every node is visited once, in reverse tape order; gradients from
    /// fan-out are summed. Only leaves keep their gradient afterwards.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::DetachedGraph);
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            for (parent, g) in self.local_grads(node, &gy)? {
                if !self.rg(parent) {
                    continue;
                }
                accumulate(&mut grads[parent.0], g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, node: &Node, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel();
                let (bd, ad, g) = (tb.data(), ta.data(), gy.data());
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    let ga: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, &g)| g * bd[i % nb]).collect(),
                        BinaryKind::Div => g.iter().enumerate().map(|(i, &g)| g / bd[i % nb]).collect(),
                    };
                    out.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; nb];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = i % nb;
                        gb[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * ad[i],
                            BinaryKind::Div => -gi * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    out.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                }
                out
            }
            Op::Unary { kind, x } => {
                let tx = self.value(*x);
                let df: Box<dyn Fn(f64, f64) -> f64> = match kind {
                    UnaryKind::Softplus => Box::new(|x, _| sigmoid(x)),
                    UnaryKind::Relu => Box::new(|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
                    UnaryKind::Tanh => Box::new(|_, y| 1.0 - y * y),
                    UnaryKind::Sigmoid => Box::new(|_, y| y * (1.0 - y)),
                    UnaryKind::Exp => Box::new(|_, y| y),
                    UnaryKind::Square => Box::new(|x, _| 2.0 * x),
                };
                let data = gy
                    .data()
                    .iter()
                    .zip(tx.data().iter().zip(y.data()))
                    .map(|(&g, (&xv, &yv))| g * df(xv, yv))
                    .collect();
                vec![(*x, Tensor::new(tx.shape().to_vec(), data)?)]
            }
            Op::Log { x, eps } => {
                let gx = gy.zip_map(self.value(*x), |g, xv| g / (xv + eps))?;
                vec![(*x, gx)]
            }
            Op::LogFloor { x, floor } => {
                let gx = gy.zip_map(self.value(*x), |g, xv| if xv > *floor { g / xv } else { 0.0 })?;
                vec![(*x, gx)]
            }
            Op::Scale { x, factor } => vec![(*x, gy.map(|g| g * factor))],
            Op::Offset { x } => vec![(*x, gy.clone())],
            Op::Sum { x } => {
                let g = gy.item();
                vec![(*x, Tensor::full(self.shape(*x).to_vec(), g))]
            }
            Op::Reshape { x } => vec![(*x, gy.reshape(self.shape(*x).to_vec())?)],
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            data.extend_from_slice(&gy.data()[start..start + chunk]);
                        }
                        out.push((p, Tensor::new(ps, data)?));
                    }
                    offset += chunk;
                }
                out
            }
            Op::ReverseTime { x } => vec![(*x, reverse_time(gy))],
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    crate::tensor::gemm_nt_acc(gy.data(), tb.data(), &mut ga, m, n, k);
                    out.push((*a, Tensor::new([m, k], ga)?));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    crate::tensor::gemm_tn_acc(ta.data(), gy.data(), &mut gb, m, k, n);
                    out.push((*b, Tensor::new([k, n], gb)?));
                }
                out
            }
            Op::Softmax { x } => {
                let c = *y.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; y.numel()];
                for ((grow, yrow), out) in gy
                    .data()
                    .chunks(c.max(1))
                    .zip(y.data().chunks(c.max(1)))
                    .zip(gx.chunks_mut(c.max(1)))
                {
                    let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, &g), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = yv * (g - s);
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::MaxPool { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x).to_vec());
                let gd = gx.data_mut();
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    gd[src] += g;
                }
                vec![(*x, gx)]
            }
            Op::Conv1d(rec) => rec.backward(self, gy)?,
            Op::BatchNorm(rec) => rec.backward(self, gy)?,
            Op::Lstm(rec) => rec.backward(self, y, gy)?,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn kind_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() {
        return Err(Error::Rank {
            op,
            expected: a.len(),
            got: b.len(),
        });
    }
    let off = a.len() - b.len();
    for (i, &bd) in b.iter().enumerate() {
        if a[off + i] != bd {
            return Err(Error::shape(op, format!("axis {}", off + i), a[off + i], bd));
        }
    }
    Ok(())
}

pub(crate) fn reverse_time(t: &Tensor) -> Tensor {
    let (b, len, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for bi in 0..b {
        for ti in (0..len).rev() {
            let s = (bi * len + ti) * c;
            out.extend_from_slice(&d[s..s + c]);
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same element count")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `ln(1 + eˣ)`, overflow-safe.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
