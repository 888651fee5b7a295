//! Append-only differentiation tape.
//!
//! Every operation evaluates eagerly and appends a node holding its cached
//! forward value. Backward passes are expressed with the same tape
//! operations, so a gradient computed with `record = true` is itself a set of
//! tape nodes and can be differentiated again (Hessian-vector products).
//! With `record = false` the backward nodes are discarded once the gradient
//! values have been read, leaving the tape exactly as it was.
//!
//! Broadcasting is limited to scalar-with-tensor and `[1, n]` / `[m, 1]`
//! vectors against `[m, n]` matrices. Everything else is a shape error.

use nalgebra::DMatrix;

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    /// `scale * x + shift`; only the scale matters for the backward pass.
    Affine(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    /// Broadcast of the input up to this node's shape.
    Broadcast(Var),
    SumAll(Var),
    /// Rank-2 reduction keeping the reduced axis with extent 1.
    SumAxis(Var),
    /// Reduction max; stores the flat index of the (first) maximum.
    MaxAll(Var, usize),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    /// Embeds the input into zeros of this node's shape at `start` along `axis`.
    Pad { src: Var, axis: usize, start: usize },
    Aggregate { src: Var, kernel: [f64; 9] },
    Select { mask: Tensor, a: Var, b: Var },
    /// Solution `X` of `A X = B`.
    Solve(Var, Var),
    WrapAngle(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Const => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | Solve(a, b) => vec![*a, *b],
            Select { a, b, .. } => vec![*a, *b],
            Neg(x) | Affine(x, ..) | Transpose(x) | Reshape(x) | Broadcast(x) | SumAll(x)
            | SumAxis(x) | MaxAll(x, _) | Exp(x) | Log(x) | Tanh(x) | Sigmoid(x) | Relu(x)
            | Softplus(x) | Sin(x) | Cos(x) | Sqrt(x) | Softmax(x) | WrapAngle(x) => vec![*x],
            Slice { src, .. } | Pad { src, .. } | Aggregate { src, .. } => vec![*src],
            Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of evaluated operations.
///
/// Node ids are topologically ordered: inputs always precede consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn row_col(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
}

/// Whether `src` may be broadcast to `dst` under the documented rules.
fn broadcastable(src: &[usize], dst: &[usize]) -> bool {
    if src == dst {
        return true;
    }
    let numel: usize = src.iter().product();
    if numel == 1 && src.iter().all(|&d| d == 1) {
        return true;
    }
    match (row_col(src), row_col(dst)) {
        (Some((1, n)), Some((_, n2))) => n == n2,
        (Some((m, 1)), Some((m2, _))) => m == m2,
        _ => false,
    }
}

fn broadcast_value(src: &Tensor, dst: &[usize]) -> Tensor {
    if src.shape() == dst {
        return src.clone();
    }
    if src.numel() == 1 {
        return Tensor::filled(dst, src.data()[0]);
    }
    let (m, n) = row_col(dst).expect("checked by broadcastable");
    let mut out = Vec::with_capacity(m * n);
    if src.shape()[0] == 1 {
        for _ in 0..m {
            out.extend_from_slice(src.data());
        }
    } else {
        for i in 0..m {
            out.extend(std::iter::repeat_n(src.data()[i], n));
        }
    }
    Tensor::new(dst.to_vec(), out).expect("broadcast shape")
}

/// Splits a shape at `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn aggregate_value(x: &Tensor, kernel: &[f64; 9]) -> Tensor {
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], if shape.len() == 3 { shape[2] } else { 1 });
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..h {
        for j in 0..w {
            let dst = (i * w + j) * c;
            for (k, &kv) in kernel.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let (di, dj) = (k / 3, k % 3);
                let (si, sj) = (i + di, j + dj);
                if si == 0 || sj == 0 || si > h || sj > w {
                    continue;
                }
                let s = ((si - 1) * w + (sj - 1)) * c;
                for ch in 0..c {
                    out[dst + ch] += kv * src[s + ch];
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("aggregate shape")
}

fn softmax_value(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    if cols == 0 {
        return x.clone();
    }
    for row in out.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn solve_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims2("solve")?;
    let (bn, k) = b.dims2("solve")?;
    if n != n2 || bn != n {
        return Err(AdError::ShapeMismatch { op: "solve", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let am = DMatrix::from_row_slice(n, n, a.data());
    let bm = DMatrix::from_row_slice(n, k, b.data());
    let x = am.lu().solve(&bm).ok_or(AdError::Singular { op: "solve" })?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(AdError::Singular { op: "solve" });
    }
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            out.push(x[(i, j)]);
        }
    }
    Tensor::matrix(n, k, out)
}

fn wrap_angle(x: f64) -> f64 {
    x.sin().atan2(x.cos())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Scalar value of a scalar-like node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Constant copy of a node's value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- broadcasting -------------------------------------------------

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if src == shape {
            return Ok(x);
        }
        if !broadcastable(src, shape) {
            return Err(AdError::ShapeMismatch { op: "broadcast", lhs: src.to_vec(), rhs: shape.to_vec() });
        }
        let value = broadcast_value(self.value(x), shape);
        Ok(self.push(Op::Broadcast(x), value))
    }

    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if na >= nb && broadcastable(&sb, &sa) {
            let b = self.broadcast_to(b, &sa)?;
            return Ok((a, b));
        }
        if nb > na && broadcastable(&sa, &sb) {
            let a = self.broadcast_to(a, &sb)?;
            return Ok((a, b));
        }
        Err(AdError::ShapeMismatch { op, lhs: sa, rhs: sb })
    }

    /// Reduces `g` (shaped like a broadcast result) back to `shape`.
    fn unbroadcast(&mut self, g: Var, shape: &[usize]) -> Result<Var> {
        let gs = self.shape(g).to_vec();
        if gs == shape {
            return Ok(g);
        }
        let numel: usize = shape.iter().product();
        if numel == 1 {
            let s = self.sum(g);
            return self.reshape(s, shape);
        }
        match row_col(shape) {
            Some((1, _)) => self.sum_axis(g, 0),
            Some((_, 1)) => self.sum_axis(g, 1),
            _ => Err(AdError::ShapeMismatch { op: "unbroadcast", lhs: gs, rhs: shape.to_vec() }),
        }
    }

    // ---- elementwise binary --------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, node: fn(Var, Var) -> Op) -> Result<Var> {
        let (a, b) = self.align(op, a, b)?;
        let value = self.value(a).zip_map(self.value(b), op, f)?;
        Ok(self.push(node(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise division; an exactly zero divisor is rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(pos) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(AdError::Domain { op: "div", detail: format!("zero divisor at flat index {pos}") });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary ---------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, node: fn(Var) -> Op) -> Var {
        let value = self.value(x).map(f);
        self.push(node(x), value)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg)
    }

    /// `scale * x + shift`; only the scale matters for the backward pass..
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp)
    }

    /// Natural log; nonpositive inputs are rejected.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.value(x).data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
            return Err(AdError::Domain { op: "log", detail: format!("nonpositive input at flat index {pos}") });
        }
        Ok(self.unary(x, f64::ln, Op::Log))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos)
    }

    /// Square root; negative inputs are rejected.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.value(x).data().iter().position(|&v| v < 0.0 || v.is_nan()) {
            return Err(AdError::Domain { op: "sqrt", detail: format!("negative input at flat index {pos}") });
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt))
    }

    /// Wraps angles to (-pi, pi]. The derivative is taken as 1.
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        self.unary(x, wrap_angle, Op::WrapAngle)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis` of a matrix, keeping the axis with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("sum_axis")?;
        let data = self.value(x).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for row in data.chunks(n.max(1)) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, n, out)?
            }
            1 => Tensor::matrix(m, 1, data.chunks(n.max(1)).map(|r| r.iter().sum()).collect())?,
            _ => {
                return Err(AdError::InvalidShape {
                    op: "sum_axis",
                    shape: vec![m, n],
                    reason: format!("axis {axis} out of range"),
                })
            }
        };
        Ok(self.push(Op::SumAxis(x), value))
    }

    /// Maximum over all elements; gradient flows to the first maximizer.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data();
        if data.is_empty() {
            return Err(AdError::InvalidShape { op: "max", shape: self.shape(x).to_vec(), reason: "empty".into() });
        }
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let value = Tensor::scalar(data[best]);
        Ok(self.push(Op::MaxAll(x, best), value))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::ShapeMismatch { op: "dot", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ---- structure -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(Op::Transpose(x), value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Softmax over the last axis (whole vector, or each matrix row).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank == 0 || rank > 2 {
            return Err(AdError::InvalidShape {
                op: "softmax",
                shape: self.shape(x).to_vec(),
                reason: "expected a vector or matrix".into(),
            });
        }
        let value = softmax_value(self.value(x));
        Ok(self.push(Op::Softmax(x), value))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(AdError::InvalidShape { op: "concat", shape: vec![], reason: "no inputs".into() }),
        };
        if axis >= first.len() {
            return Err(AdError::InvalidShape { op: "concat", shape: first, reason: format!("axis {axis} out of range") });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AdError::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(xs.to_vec(), axis), value))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AdError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(Op::Slice { src: x, axis, start }, value))
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let flat = if self.value(x).rank() == 1 { x } else { self.reshape(x, &[self.value(x).numel()])? };
        let s = self.slice(flat, 0, i, 1)?;
        self.reshape(s, &[])
    }

    /// Places `x` into zeros of extent `full` along `axis`, starting at `start`.
    pub fn pad(&mut self, x: Var, axis: usize, start: usize, full: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + shape[axis] > full {
            return Err(AdError::InvalidShape { op: "pad", shape, reason: format!("cannot place at {start} within {full}") });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let mut new_shape = shape;
        new_shape[axis] = full;
        let mut out = vec![0.0; outer * full * inner];
        let data = self.value(x).data();
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            out[dst..dst + extent * inner].copy_from_slice(&data[o * extent * inner..(o + 1) * extent * inner]);
        }
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(Op::Pad { src: x, axis, start }, value))
    }

    /// Zero-padded 3x3 neighborhood aggregation with a fixed kernel.
    ///
    /// Accepts `[H, W]` maps or channels-last `[H, W, C]` stacks (each channel
    /// aggregated independently). `kernel[3 * (dy + 1) + (dx + 1)]` weights the
    /// neighbor at row offset `dy` and column offset `dx`.
    pub fn aggregate(&mut self, x: Var, kernel: [f64; 9]) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank != 2 && rank != 3 {
            return Err(AdError::InvalidShape {
                op: "aggregate",
                shape: self.shape(x).to_vec(),
                reason: "expected [H, W] or [H, W, C]".into(),
            });
        }
        let value = aggregate_value(self.value(x), &kernel);
        Ok(self.push(Op::Aggregate { src: x, kernel }, value))
    }

    /// `mask ? a : b` elementwise; any nonzero mask entry selects `a`.
    pub fn select(&mut self, mask: &Tensor, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("select", a, b)?;
        if mask.shape() != self.shape(a) {
            return Err(AdError::ShapeMismatch { op: "select", lhs: mask.shape().to_vec(), rhs: self.shape(a).to_vec() });
        }
        let mask = mask.map(|m| if m != 0.0 { 1.0 } else { 0.0 });
        let value = Tensor::new(
            mask.shape().to_vec(),
            mask.data()
                .iter()
                .zip(self.value(a).data().iter().zip(self.value(b).data()))
                .map(|(&m, (&x, &y))| if m != 0.0 { x } else { y })
                .collect(),
        )?;
        Ok(self.push(Op::Select { mask, a, b }, value))
    }

    /// Solves `A X = B` for square `A` and matrix `B`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = solve_value(self.value(a), self.value(b))?;
        Ok(self.push(Op::Solve(a, b), value))
    }

    // ---- differentiation -----------------------------------------------

    /// Gradients of a scalar `output` with respect to each node in `wrt`.
    ///
    /// With `record = true` the backward pass stays on the tape and the
    /// returned nodes can be differentiated again. Otherwise the returned
    /// nodes are constants. Nodes that `output` does not depend on get a zero
    /// gradient.
    pub fn gradient(&mut self, output: Var, wrt: &[Var], record: bool) -> Result<Vec<Var>> {
        if record {
            return self.backward(output, wrt);
        }
        let values = self.grad(output, wrt)?;
        Ok(values.into_iter().map(|v| self.constant(v)).collect())
    }

    /// Gradient values; the tape is left unchanged.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let result = self.backward(output, wrt).map(|gs| gs.iter().map(|&g| self.value(g).clone()).collect());
        self.nodes.truncate(mark);
        result
    }

    /// Hessian-vector product `H v` where `grad_x` is a recorded gradient of
    /// some scalar with respect to `x`.
    pub fn hvp_from_grad(&mut self, grad_x: Var, x: Var, v: &Tensor) -> Result<Tensor> {
        if self.shape(grad_x) != v.shape() {
            return Err(AdError::ShapeMismatch { op: "hvp", lhs: self.shape(grad_x).to_vec(), rhs: v.shape().to_vec() });
        }
        let mark = self.nodes.len();
        let result = (|| {
            let vc = self.constant(v.clone());
            let inner = self.dot(grad_x, vc)?;
            let mut g = self.grad(inner, &[x])?;
            Ok(g.remove(0))
        })();
        self.nodes.truncate(mark);
        result
    }

    fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if !self.value(output).is_scalar_like() {
            return Err(AdError::NotScalar { shape: self.shape(output).to_vec() });
        }
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Ok(Vec::new());
        };
        let hi = output.0;
        if hi < lo {
            return Ok(wrt.iter().map(|w| self.constant(Tensor::zeros(self.nodes[w.0].value.shape()))).collect());
        }
        // relevant[i]: node lo+i depends on some wrt node (ids are topological).
        let mut relevant = vec![false; hi.saturating_add(1).saturating_sub(lo)];
        for w in wrt {
            if w.0 <= hi {
                relevant[w.0 - lo] = true;
            }
        }
        for id in lo..=hi {
            if relevant[id - lo] {
                continue;
            }
            relevant[id - lo] = self.nodes[id].op.inputs().iter().any(|v| v.0 >= lo && relevant[v.0 - lo]);
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; relevant.len()];
        if relevant[hi - lo] {
            let seed = Tensor::ones(self.shape(output));
            adjoint[hi - lo] = Some(self.constant(seed));
        }
        for id in (lo..=hi).rev() {
            let Some(g) = adjoint[id - lo] else { continue };
            let needs = |v: Var| v.0 >= lo && relevant[v.0 - lo];
            if !self.nodes[id].op.inputs().into_iter().any(needs) {
                continue;
            }
            let contributions = self.vjp(id, g, &needs)?;
            for (input, c) in contributions {
                let slot = &mut adjoint[input.0 - lo];
                *slot = Some(match *slot {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            out.push(match adjoint[w.0 - lo] {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(*w));
                    self.constant(zeros)
                }
            });
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `id` for the inputs selected by `needs`.
    fn vjp(&mut self, id: usize, g: Var, needs: &dyn Fn(Var) -> bool) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let y = Var(id);
        let op = self.nodes[id].op.clone();
        let mut out = Vec::with_capacity(2);
        match op {
            Leaf | Const => {}
            Add(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, self.neg(g)));
                }
            }
            Mul(a, b) => {
                if needs(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if needs(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Div(a, b) => {
                if needs(a) {
                    out.push((a, self.div(g, b)?));
                }
                if needs(b) {
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, b)?;
                    out.push((b, self.neg(q)));
                }
            }
            Neg(x) => out.push((x, self.neg(g))),
            Affine(x, s) => out.push((x, self.scale(g, s))),
            Matmul(a, b) => {
                if needs(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if needs(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Transpose(x) => out.push((x, self.transpose(g)?)),
            Reshape(x) => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.reshape(g, &shape)?));
            }
            Broadcast(x) => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.unbroadcast(g, &shape)?));
            }
            SumAll(x) | SumAxis(x) => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.broadcast_to(g, &shape)?));
            }
            MaxAll(x, idx) => {
                let shape = self.shape(x).to_vec();
                let mut onehot = Tensor::zeros(&shape).into_data();
                onehot[idx] = 1.0;
                let mask = self.constant(Tensor::new(shape.clone(), onehot)?);
                let gb = self.broadcast_to(g, &shape)?;
                out.push((x, self.mul(gb, mask)?));
            }
            Exp(x) => out.push((x, self.mul(g, y)?)),
            Log(x) => out.push((x, self.div(g, x)?)),
            Tanh(x) => {
                let yy = self.square(y);
                let d = self.affine(yy, -1.0, 1.0);
                out.push((x, self.mul(g, d)?));
            }
            Sigmoid(x) => {
                let yy = self.square(y);
                let d = self.sub(y, yy)?;
                out.push((x, self.mul(g, d)?));
            }
            Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                out.push((x, self.mul(g, m)?));
            }
            Softplus(x) => {
                let s = self.sigmoid(x);
                out.push((x, self.mul(g, s)?));
            }
            Sin(x) => {
                let c = self.cos(x);
                out.push((x, self.mul(g, c)?));
            }
            Cos(x) => {
                let s = self.sin(x);
                let ns = self.neg(s);
                out.push((x, self.mul(g, ns)?));
            }
            Sqrt(x) => {
                let half = self.scale(g, 0.5);
                out.push((x, self.div(half, y)?));
            }
            Softmax(x) => {
                let gy = self.mul(g, y)?;
                let shape = self.shape(x).to_vec();
                let s = if shape.len() == 1 { self.sum(gy) } else { self.sum_axis(gy, 1)? };
                let sb = self.broadcast_to(s, &shape)?;
                let diff = self.sub(g, sb)?;
                out.push((x, self.mul(y, diff)?));
            }
            Concat(xs, axis) => {
                let mut start = 0;
                for x in xs {
                    let len = self.shape(x)[axis];
                    if needs(x) {
                        out.push((x, self.slice(g, axis, start, len)?));
                    }
                    start += len;
                }
            }
            Slice { src, axis, start } => {
                let full = self.shape(src)[axis];
                out.push((src, self.pad(g, axis, start, full)?));
            }
            Pad { src, axis, start } => {
                let len = self.shape(src)[axis];
                out.push((src, self.slice(g, axis, start, len)?));
            }
            Aggregate { src, kernel } => {
                let mut flipped = kernel;
                flipped.reverse();
                out.push((src, self.aggregate(g, flipped)?));
            }
            Select { mask, a, b } => {
                if needs(a) {
                    let m = self.constant(mask.clone());
                    out.push((a, self.mul(g, m)?));
                }
                if needs(b) {
                    let m = self.constant(mask.map(|v| 1.0 - v));
                    out.push((b, self.mul(g, m)?));
                }
            }
            Solve(a, b) => {
                let at = self.transpose(a)?;
                let gb = self.solve(at, g)?;
                if needs(a) {
                    let xt = self.transpose(y)?;
                    let ga = self.matmul(gb, xt)?;
                    out.push((a, self.neg(ga)));
                }
                if needs(b) {
                    out.push((b, gb));
                }
            }
            WrapAngle(x) => out.push((x, g)),
        }
        out.retain(|(v, _)| needs(*v));
        Ok(out)
    }
}

/// Hessian-vector product of `f` at `x` along `v` without forming the Hessian.
pub fn hvp<F>(f: F, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if x.shape() != v.shape() {
        return Err(AdError::ShapeMismatch { op: "hvp", lhs: x.shape().to_vec(), rhs: v.shape().to_vec() });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let g = tape.gradient(y, &[xv], true)?[0];
    tape.hvp_from_grad(g, xv, v)
}

/// Gradient of a scalar function at `x`.
pub fn grad<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.grad(y, &[xv])?.remove(0))
}
