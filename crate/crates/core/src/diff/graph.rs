//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is the tape for one optimisation step: parameters and inputs
//! enter as leaves, every operation appends a node whose inputs precede it,
//! and [`Graph::backward`] walks the nodes in reverse insertion order, which
//! is a valid reverse topological order. Drop the graph (or call
//! [`Graph::clear`]) once the step's gradients have been read.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[1, n]` (or `[n]`) repeated over every row of `[B, n]`.
    Row,
    /// `[B, 1]` repeated over every column of `[B, n]`.
    Column,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let rhs_n: usize = rhs.iter().product();
        if lhs == rhs {
            return Ok(Self::Same);
        }
        if rhs_n == 1 {
            return Ok(Self::Scalar);
        }
        if lhs.len() == 2 {
            let (b, n) = (lhs[0], lhs[1]);
            if rhs == [1, n] || rhs == [n] {
                return Ok(Self::Row);
            }
            if rhs == [b, 1] {
                return Ok(Self::Column);
            }
        }
        Err(Error::ShapeMismatch {
            op,
            left: lhs.to_vec(),
            right: rhs.to_vec(),
        })
    }

    #[inline]
    fn rhs_index(self, i: usize, cols: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Row => i % cols,
            Self::Column => i / cols,
            Self::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Var, Var),
    SliceCols(Var, usize, usize),
}

/// Operation kinds addressable through [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Tanh,
    Relu,
    LeakyRelu,
    Softplus,
    Square,
    Sqrt,
    Sum,
    Mean,
    SumRows,
    Concat,
    Slice { start: usize, end: usize },
}

impl OpKind {
    pub fn arity(self) -> usize {
        match self {
            Self::MatMul | Self::Add | Self::Sub | Self::Mul | Self::Concat => 2,
            _ => 1,
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), true, Op::Leaf)
    }

    /// Leaf that receives a gradient, taking ownership of the value.
    pub fn param_owned(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`; intended for `[1, 1]` results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participates in the gradient computation.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` was unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_vec(&shape, g.to_vec()).expect("grad matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(Var, Var, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Broadcast::resolve(name, va.shape(), vb.shape())?;
        let cols = va.cols();
        let bd = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bc.rhs_index(i, cols)]))
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, make(a, b, bc)))
    }

    /// Elementwise sum; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), Float::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0))
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(x, Op::Log(x), Float::ln))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), Float::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::LeakyRelu(x), leaky_relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0))
        {
            return Err(Error::Domain {
                op: "sqrt",
                index,
                value,
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), Float::sqrt))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Sum of all elements, shape `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Mean of all elements, shape `[1, 1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Per-row sum: `[B, n] -> [B, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        let data = (0..rows)
            .map(|r| v.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let value = Tensor::from_vec(&[rows, 1], data).expect("row sums");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::SumRows(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let value = Tensor::from_vec(&[c, r], transpose(v.data(), r, c))?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    /// Column-wise concatenation of two rank-2 tensors with equal rows.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (rows, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Tensor::from_vec(&[rows, ca + cb], data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, rg, Op::Concat(a, b)))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 2 || start >= end || end > v.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: v.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let value = Tensor::from_vec(&[rows, end - start], data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::SliceCols(x, start, end)))
    }

    /// Dispatches an operation by kind.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::DimensionMismatch {
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let x = inputs[0];
        Ok(match kind {
            OpKind::MatMul => self.matmul(x, inputs[1])?,
            OpKind::Add => self.add(x, inputs[1])?,
            OpKind::Sub => self.sub(x, inputs[1])?,
            OpKind::Mul => self.mul(x, inputs[1])?,
            OpKind::Concat => self.concat(x, inputs[1])?,
            OpKind::Exp => self.exp(x),
            OpKind::Log => self.log(x)?,
            OpKind::Tanh => self.tanh(x),
            OpKind::Relu => self.relu(x),
            OpKind::LeakyRelu => self.leaky_relu(x),
            OpKind::Softplus => self.softplus(x),
            OpKind::Square => self.square(x),
            OpKind::Sqrt => self.sqrt(x)?,
            OpKind::Sum => self.sum(x),
            OpKind::Mean => self.mean(x),
            OpKind::SumRows => self.sum_rows(x),
            OpKind::Slice { start, end } => self.slice_cols(x, start, end)?,
        })
    }

    /// Computes `d root / d v` for every node `v` that requires a gradient.
    ///
    /// Gradients from earlier calls are discarded first. A node used by
    /// several consumers receives the sum of their contributions.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot { shape: shape.to_vec() });
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &upstream);
            self.grads[i] = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, up: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        match nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(g) = slot(nodes, grads, a) {
                    add_assign(g, up);
                }
                let cols = val(a).cols();
                if let Some(g) = slot(nodes, grads, b) {
                    for (k, &u) in up.iter().enumerate() {
                        g[bc.rhs_index(k, cols)] += sign * u;
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let cols = val(a).cols();
                let (ad, bd) = (val(a).data(), val(b).data());
                if let Some(g) = slot(nodes, grads, a) {
                    for (k, &u) in up.iter().enumerate() {
                        g[k] += u * bd[bc.rhs_index(k, cols)];
                    }
                }
                if let Some(g) = slot(nodes, grads, b) {
                    for (k, &u) in up.iter().enumerate() {
                        g[bc.rhs_index(k, cols)] += u * ad[k];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if let Some(g) = slot(nodes, grads, a) {
                    // dA += dC * B^T
                    let bt = transpose(val(b).data(), k, n);
                    matmul_into(up, &bt, g, m, n, k);
                }
                if let Some(g) = slot(nodes, grads, b) {
                    // dB += A^T * dC
                    let at = transpose(val(a).data(), m, k);
                    matmul_into(&at, up, g, k, m, n);
                }
            }
            Op::Transpose(x) => {
                let s = nodes[i].value.shape();
                if let Some(g) = slot(nodes, grads, x) {
                    add_assign(g, &transpose(up, s[0], s[1]));
                }
            }
            Op::Neg(x) => unary_back(nodes, grads, x, up, |_| -1.0),
            Op::Scale(x, c) => unary_back(nodes, grads, x, up, |_| c),
            Op::AddScalar(x) => unary_back(nodes, grads, x, up, |_| 1.0),
            Op::Log(x) => unary_back(nodes, grads, x, up, |v| 1.0 / v),
            Op::Relu(x) => unary_back(nodes, grads, x, up, |v| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyRelu(x) => unary_back(nodes, grads, x, up, leaky_relu_grad),
            Op::Softplus(x) => unary_back(nodes, grads, x, up, sigmoid),
            Op::Square(x) => unary_back(nodes, grads, x, up, |v| 2.0 * v),
            Op::Clamp(x, lo, hi) => unary_back(nodes, grads, x, up, |v| if v >= lo && v <= hi { 1.0 } else { 0.0 }),
            Op::Exp(x) => output_back(nodes, grads, i, x, up, |o| o),
            Op::Tanh(x) => output_back(nodes, grads, i, x, up, |o| 1.0 - o * o),
            Op::Sqrt(x) => output_back(nodes, grads, i, x, up, |o| if o > 0.0 { 0.5 / o } else { 0.0 }),
            Op::Sum(x) => {
                if let Some(g) = slot(nodes, grads, x) {
                    g.iter_mut().for_each(|g| *g += up[0]);
                }
            }
            Op::Mean(x) => {
                let u = up[0] / val(x).numel().max(1) as f64;
                if let Some(g) = slot(nodes, grads, x) {
                    g.iter_mut().for_each(|g| *g += u);
                }
            }
            Op::SumRows(x) => {
                let cols = val(x).cols();
                if let Some(g) = slot(nodes, grads, x) {
                    for (k, g) in g.iter_mut().enumerate() {
                        *g += up[k / cols];
                    }
                }
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (val(a).cols(), val(b).cols());
                let w = ca + cb;
                if let Some(g) = slot(nodes, grads, a) {
                    for (k, g) in g.iter_mut().enumerate() {
                        *g += up[(k / ca) * w + k % ca];
                    }
                }
                if let Some(g) = slot(nodes, grads, b) {
                    for (k, g) in g.iter_mut().enumerate() {
                        *g += up[(k / cb) * w + ca + k % cb];
                    }
                }
            }
            Op::SliceCols(x, start, end) => {
                let cols = val(x).cols();
                let width = end - start;
                if let Some(g) = slot(nodes, grads, x) {
                    for (k, &u) in up.iter().enumerate() {
                        g[(k / width) * cols + start + k % width] += u;
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for nodes that
/// do not require a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Backward of `y = f(x)` with the derivative written in terms of `x`.
fn unary_back(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: Var, up: &[f64], d: impl Fn(f64) -> f64) {
    let xs = nodes[x.0].value.data();
    if let Some(g) = slot(nodes, grads, x) {
        for ((g, &u), &xv) in g.iter_mut().zip(up).zip(xs) {
            *g += u * d(xv);
        }
    }
}

/// Backward of `y = f(x)` with the derivative written in terms of `y`.
fn output_back(nodes: &[Node], grads: &mut [Option<Vec<f64>>], out: usize, x: Var, up: &[f64], d: impl Fn(f64) -> f64) {
    let ys = nodes[out].value.data();
    if let Some(g) = slot(nodes, grads, x) {
        for ((g, &u), &yv) in g.iter_mut().zip(up).zip(ys) {
            *g += u * d(yv);
        }
    }
}

#[inline]
pub fn leaky_relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// Derivative of [`leaky_relu`]; the kink at 0 takes the negative-side slope.
#[inline]
pub fn leaky_relu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `out[m, n] += a[m, k] * b[k, n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}
