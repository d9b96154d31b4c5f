//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, so the tape is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.
//! Gradients are only propagated into nodes that (transitively) depend on a
//! leaf created with [`Graph::param`]; frozen weights go in as
//! [`Graph::constant`] and cost nothing on the way back.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    /// tanh approximation
    Gelu,
    Silu,
    Sqrt,
    Square,
    Relu,
    Recip,
    /// Pass-through inside `[lo, hi]`, zero gradient outside.
    Clamp(f64, f64),
    /// `max(x, lo)`, zero gradient below.
    ClampMin(f64),
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat(Vec<Var>, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.nodes.borrow().len())
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_apply(&va, &vb, op, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), self.needs(&[a]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn shift(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Shift(a), self.needs(&[a]))
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let v = self.value(a).map(|x| unary_forward(kind, x));
        self.push(v, Op::Unary(a, kind), self.needs(&[a]))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), self.needs(&[a]))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = permute(&self.value(a), perm)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), self.needs(&[a])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), self.needs(&[a])))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = slice(&self.value(a), axis, start, end)?;
        Ok(self.push(
            v,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            self.needs(&[a]),
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = concat(&refs, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), self.needs(parts)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), self.needs(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), self.needs(&[a]))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let v = sum_axis(&self.value(a), axis)?;
        Ok(self.push(v, Op::SumAxis(a), self.needs(&[a])))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let v = softmax_last(&self.value(a));
        self.push(v, Op::Softmax(a), self.needs(&[a]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (v, inv) = layer_norm_last(&self.value(a), eps);
        self.push(v, Op::LayerNorm(a, inv), self.needs(&[a]))
    }

    /// Rows of a `[vocab, dim]` table.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Argument(format!("row {id} out of range for table of {vocab}")));
            }
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let v = Tensor::from_vec(&[ids.len(), dim], data);
        Ok(self.push(v, Op::Gather(table, ids.to_vec()), self.needs(&[table])))
    }

    /// Inserts an operation whose value and backward rule are supplied by the
    /// caller. `backward` maps the output gradient to one optional gradient per
    /// input, in order.
    pub fn custom(
        &self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), Box::new(backward)), self.needs(inputs))
    }

    // Composite helpers.

    /// `x · w + b` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn mean_square(&self, a: Var) -> Var {
        let sq = self.square(a);
        self.mean(sq)
    }

    /// Scales every vector along the last axis to unit length.
    pub fn l2_normalize(&self, a: Var, eps: f64) -> Result<Var> {
        let last = self.shape(a).len() - 1;
        let sq = self.square(a);
        let ss = self.sum_axis(sq, last)?;
        let ss = self.shift(ss, eps);
        let norm = self.sqrt(ss);
        self.div(a, norm)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut emit = |v: Var, t: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(*a) {
                        emit(*a, reduce_to(&g, val(*a).shape()));
                    }
                    if needs(*b) {
                        emit(*b, reduce_to(&g, val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        emit(*a, reduce_to(&g, val(*a).shape()));
                    }
                    if needs(*b) {
                        emit(*b, reduce_to(&g.scale(-1.0), val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let t = broadcast_apply(&g, val(*b), "mul", |x, y| x * y)?;
                        emit(*a, reduce_to(&t, val(*a).shape()));
                    }
                    if needs(*b) {
                        let t = broadcast_apply(&g, val(*a), "mul", |x, y| x * y)?;
                        emit(*b, reduce_to(&t, val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    if needs(*a) {
                        let t = broadcast_apply(&g, val(*b), "div", |x, y| x / y)?;
                        emit(*a, reduce_to(&t, val(*a).shape()));
                    }
                    if needs(*b) {
                        // d(a/b)/db = -out / b
                        let t = g.zip_map(out, |x, y| -x * y)?;
                        let t = broadcast_apply(&t, val(*b), "div", |x, y| x / y)?;
                        emit(*b, reduce_to(&t, val(*b).shape()));
                    }
                }
                Op::Scale(a, s) => emit(*a, g.scale(*s)),
                Op::Shift(a) => emit(*a, g),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let mut t = g;
                    for ((gi, &xi), &yi) in t.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                        *gi *= unary_derivative(*kind, xi, yi);
                    }
                    emit(*a, t);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        emit(*a, g.matmul(&vb.transpose())?);
                    }
                    if needs(*b) {
                        let gb = if vb.ndim() == 2 && va.ndim() > 2 {
                            let k = va.shape()[va.ndim() - 1];
                            let nn = g.shape()[g.ndim() - 1];
                            let a2 = va.reshape(&[va.numel() / k, k])?;
                            let g2 = g.reshape(&[g.numel() / nn, nn])?;
                            a2.transpose().matmul(&g2)?
                        } else {
                            va.transpose().matmul(&g)?
                        };
                        emit(*b, gb);
                    }
                }
                Op::Transpose(a) => emit(*a, g.transpose()),
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    emit(*a, permute(&g, &inv)?);
                }
                Op::Reshape(a) => emit(*a, g.into_reshape(val(*a).shape())?),
                Op::Slice { src, axis, start } => {
                    emit(*src, unslice(&g, val(*src).shape(), *axis, *start));
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if needs(p) {
                            emit(p, slice(&g, *axis, offset, offset + len)?);
                        }
                        offset += len;
                    }
                }
                Op::Sum(a) => emit(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let x = val(*a);
                    emit(*a, Tensor::full(x.shape(), g.item() / x.numel() as f64));
                }
                Op::SumAxis(a) => {
                    emit(*a, broadcast_apply(&Tensor::zeros(val(*a).shape()), &g, "sum_axis", |_, y| y)?);
                }
                Op::Softmax(a) => {
                    let d = *out.shape().last().unwrap_or(&1);
                    let mut t = g;
                    for (gr, yr) in t.data_mut().chunks_mut(d).zip(out.data().chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for (gi, yi) in gr.iter_mut().zip(yr) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    emit(*a, t);
                }
                Op::LayerNorm(a, inv) => {
                    let d = *out.shape().last().unwrap_or(&1);
                    let mut t = g;
                    for ((gr, yr), &s) in t.data_mut().chunks_mut(d).zip(out.data().chunks(d)).zip(inv) {
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                        for (gi, yi) in gr.iter_mut().zip(yr) {
                            *gi = s * (*gi - mg - yi * mgy);
                        }
                    }
                    emit(*a, t);
                }
                Op::Gather(table, ids) => {
                    let shape = val(*table).shape().to_vec();
                    let dim = shape[1];
                    let mut t = Tensor::zeros(&shape);
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g.data()[row * dim..(row + 1) * dim];
                        for (d, s) in t.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    emit(*table, t);
                }
                Op::Custom(inputs, backward) => {
                    let parts = backward(&g);
                    for (&input, part) in inputs.iter().zip(parts) {
                        if let Some(part) = part {
                            if needs(input) {
                                emit(input, part);
                            }
                        }
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        Unary::Silu => x * sigmoid(x),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Relu => x.max(0.0),
        Unary::Recip => 1.0 / x,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::ClampMin(lo) => x.max(lo),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let inner = c * (x + 0.044715 * x * x * x);
            let th = inner.tanh();
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Recip => -y * y,
        Unary::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
        Unary::ClampMin(lo) => {
            if x >= lo {
                1.0
            } else {
                0.0
            }
        }
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

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let n = out.len();
    let mut idx = vec![0; n];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..numel {
        f(o, oa, ob);
        for d in (0..n).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_apply(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    let numel: usize = shape.iter().product();
    // Trailing-suffix broadcast (bias rows, per-channel scales) is the common case.
    if shape == a.shape() && a.shape().ends_with(b.shape()) {
        let nb = b.numel().max(1);
        let data = (0..numel).map(|i| f(ad[i], bd[i % nb])).collect();
        return Tensor::new(&shape, data);
    }
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut data = vec![0.0; numel];
    for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&shape, data)
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let n = out.numel().max(1);
    if g.shape().ends_with(shape) {
        let od = out.data_mut();
        for (i, &x) in g.data().iter().enumerate() {
            od[i % n] += x;
        }
        return out;
    }
    let sg = broadcast_strides(g.shape(), g.shape());
    let so = broadcast_strides(shape, g.shape());
    let gd = g.data();
    let od = out.data_mut();
    for_each_broadcast(g.shape(), &sg, &so, |_, ig, io| od[io] += gd[ig]);
    out
}

pub(crate) fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = t.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Argument(format!("invalid permutation {perm:?} for {nd} axes")));
    }
    let shape = t.shape();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; nd];
    let src = t.data();
    let mut data = vec![0.0; t.numel()];
    for_each_broadcast(&out_shape, &strides, &zeros, |o, i, _| data[o] = src[i]);
    Tensor::new(&out_shape, data)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= t.ndim() || start > end || end > t.shape()[axis] {
        return Err(Error::Argument(format!(
            "slice {start}..{end} on axis {axis} of shape {:?}",
            t.shape()
        )));
    }
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let width = (end - start) * inner;
    let mut data = Vec::with_capacity(outer * width);
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        data.extend_from_slice(&t.data()[base..base + width]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = end - start;
    Tensor::new(&shape, data)
}

fn unslice(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let (outer, len, inner) = axis_split(shape, axis);
    let width = g.shape()[axis] * inner;
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        out.data_mut()[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
    }
    out
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
    let mut shape = first.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::Argument(format!("concat axis {axis} of shape {shape:?}")));
    }
    shape[axis] = 0;
    for p in parts {
        let mut s = p.shape().to_vec();
        if s.len() != shape.len() {
            return Err(Error::Dimension {
                op: "concat",
                left: first.shape().to_vec(),
                right: s,
            });
        }
        let len = s[axis];
        s[axis] = 0;
        if s != {
            let mut r = shape.clone();
            r[axis] = 0;
            r
        } {
            return Err(Error::Dimension {
                op: "concat",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        shape[axis] += len;
    }
    let outer: usize = shape[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let (_, len, inner) = axis_split(p.shape(), axis);
            let w = len * inner;
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(&shape, data)
}

pub(crate) fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.ndim() {
        return Err(Error::Argument(format!("sum over axis {axis} of shape {:?}", t.shape())));
    }
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(&shape, data)
}

pub(crate) fn softmax_last(t: &Tensor) -> Tensor {
    let d = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

fn layer_norm_last(t: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    let mut inv = Vec::with_capacity(t.numel() / d.max(1));
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * s;
        }
        inv.push(s);
    }
    (out, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Runs `build` on a fresh graph with `x` as the only parameter and returns
    /// `(loss, d loss / d x)`.
    fn eval(x: &Tensor, build: &dyn Fn(&Graph, Var) -> Var) -> (f64, Tensor) {
        let g = Graph::new();
        let v = g.param(x.clone());
        let out = build(&g, v);
        // Weighted sum makes every output coordinate matter differently.
        let shape = g.shape(out);
        let n: usize = shape.iter().product();
        let w = Tensor::from_vec(&shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect());
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let grad = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        (g.value(loss).item(), grad)
    }

    fn check(name: &str, x: Tensor, build: impl Fn(&Graph, Var) -> Var) {
        let err = grad_check(|t| Ok(eval(t, &build)), &x, 1e-4).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }

    #[test]
    fn every_operation_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let other = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let row = Tensor::randn(&[4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let pos = x.map(|v| v.abs() + 0.5);

        check("add", x.clone(), |g, v| {
            let o = g.constant(other.clone());
            g.add(v, o).unwrap()
        });
        check("sub", x.clone(), |g, v| {
            let o = g.constant(other.clone());
            g.sub(o, v).unwrap()
        });
        check("mul", x.clone(), |g, v| g.mul(v, v).unwrap());
        check("div numerator", x.clone(), |g, v| {
            let o = g.constant(pos.clone());
            g.div(v, o).unwrap()
        });
        check("div denominator", pos.clone(), |g, v| {
            let o = g.constant(other.clone());
            g.div(o, v).unwrap()
        });
        check("broadcast add row", row.clone(), |g, v| {
            let o = g.constant(x.clone());
            g.add(o, v).unwrap()
        });
        check("broadcast mul column", Tensor::randn(&[3, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(3)), |g, v| {
            let o = g.constant(x.clone());
            g.mul(o, v).unwrap()
        });
        check("scale", x.clone(), |g, v| g.scale(v, -2.5));
        check("shift", x.clone(), |g, v| g.shift(v, 0.7));
        for kind in [Unary::Exp, Unary::Tanh, Unary::Sigmoid, Unary::Gelu, Unary::Silu, Unary::Square] {
            check(&format!("{kind:?}"), x.clone(), move |g, v| g.unary(v, kind));
        }
        for kind in [Unary::Log, Unary::Sqrt, Unary::Recip] {
            check(&format!("{kind:?}"), pos.clone(), move |g, v| g.unary(v, kind));
        }
        check("matmul lhs", x.clone(), |g, v| {
            let o = g.constant(w.clone());
            g.matmul(v, o).unwrap()
        });
        check("matmul rhs", w.clone(), |g, v| {
            let o = g.constant(x.clone());
            g.matmul(o, v).unwrap()
        });
        let batched = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        check("matmul shared rhs", w.clone(), |g, v| {
            let o = g.constant(batched.clone());
            g.matmul(o, v).unwrap()
        });
        check("transpose", x.clone(), |g, v| g.transpose(v));
        check("permute", batched.clone(), |g, v| g.permute(v, &[2, 0, 1]).unwrap());
        check("reshape", x.clone(), |g, v| g.reshape(v, &[2, 6]).unwrap());
        check("slice", x.clone(), |g, v| g.slice(v, 1, 1, 3).unwrap());
        check("concat", x.clone(), |g, v| {
            let o = g.constant(other.clone());
            g.concat(&[o, v, v], 0).unwrap()
        });
        check("sum", x.clone(), |g, v| g.sum(v));
        check("mean", x.clone(), |g, v| g.mean(v));
        check("sum_axis", batched.clone(), |g, v| g.sum_axis(v, 1).unwrap());
        check("softmax", x.clone(), |g, v| g.softmax(v));
        check("layer_norm", x.clone(), |g, v| g.layer_norm(v, 1e-5));
        check("gather_rows", x.clone(), |g, v| g.gather_rows(v, &[2, 0, 2]).unwrap());
        check("l2_normalize", x.clone(), |g, v| g.l2_normalize(v, 1e-12).unwrap());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let a = g.constant(Tensor::ones(&[2]));
        let b = g.param(Tensor::ones(&[2]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let g = Graph::new();
        let a = g.param(Tensor::ones(&[2]));
        assert!(g.backward(a).is_err());
    }
}
