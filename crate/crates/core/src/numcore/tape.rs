//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations on [`Var`] handles append a node to their [`Tape`]. Node ids
//! grow monotonically, so creation order is a topological order and the
//! backward sweep walks ids in reverse, visiting each node once.

use std::cell::RefCell;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Added to the norm in [`Var::l2_normalize`] so zero rows stay finite.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    AddBias(usize, usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Tanh(usize),
    Sqrt(usize),
    Square(usize),
    Relu(usize),
    L2Normalize(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanAxis(usize, usize),
    MaxLast(usize, Vec<usize>),
    LogSumExpLast(usize),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    PairwiseSqDist(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    param: bool,
}

/// Records a computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that does not receive a gradient report.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor, param: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, stage: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                stage: stage.to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            param: false,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Propagates d`loss`/d(node) back to every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::filled(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let params = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, _)| i)
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    /// Gradients of every [`Tape::param`] leaf, in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&id| match &self.grads[id] {
                Some(g) => g.clone(),
                None => Tensor::zeros(&self.shapes[id]),
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Reduces a same-shape gradient onto an operand that may have been broadcast
/// from a single element.
fn fit(delta: Tensor, target: &[usize]) -> Tensor {
    if delta.shape() == target {
        delta
    } else {
        Tensor::from_parts(target.to_vec(), vec![delta.data().iter().sum()])
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| &nodes[id].value;
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, a, fit(g.clone(), val(a).shape()));
            accumulate(grads, b, fit(g.clone(), val(b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, fit(g.clone(), val(a).shape()));
            accumulate(grads, b, fit(g.map(|v| -v), val(b).shape()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let ga = broadcast_zip(g, bv, |gi, bi| gi * bi);
            let gb = broadcast_zip(g, av, |gi, ai| gi * ai);
            accumulate(grads, a, fit(ga, av.shape()));
            accumulate(grads, b, fit(gb, bv.shape()));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            let ga = broadcast_zip(g, bv, |gi, bi| gi / bi);
            // d(a/b)/db = -out/b
            let gb = broadcast_zip(&g.zip_map(out, |gi, oi| -gi * oi), bv, |x, bi| x / bi);
            accumulate(grads, a, fit(ga, av.shape()));
            accumulate(grads, b, fit(gb, bv.shape()));
        }
        Op::AddScalar(a) => accumulate(grads, a, g.clone()),
        Op::MulScalar(a, s) => accumulate(grads, a, g.map(|v| v * s)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2().unwrap();
            let n = bv.dims2().unwrap().1;
            let bt = transpose_raw(bv.data(), k, n);
            let ga = matmul_raw(g.data(), &bt, m, n, k);
            let at = transpose_raw(av.data(), m, k);
            let gb = matmul_raw(&at, g.data(), k, m, n);
            accumulate(grads, a, Tensor::from_parts(vec![m, k], ga));
            accumulate(grads, b, Tensor::from_parts(vec![k, n], gb));
        }
        Op::Transpose(a) => {
            let (r, c) = g.dims2().unwrap();
            accumulate(grads, a, Tensor::from_parts(vec![c, r], transpose_raw(g.data(), r, c)));
        }
        Op::AddBias(a, b) => {
            let (m, n) = g.dims2().unwrap();
            let mut gb = vec![0.0; n];
            for i in 0..m {
                for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                    *acc += v;
                }
            }
            accumulate(grads, a, g.clone());
            accumulate(grads, b, Tensor::from_parts(vec![n], gb));
        }
        Op::Exp(a) => accumulate(grads, a, g.zip_map(out, |gi, oi| gi * oi)),
        Op::Ln(a) => accumulate(grads, a, g.zip_map(val(a), |gi, xi| gi / xi)),
        Op::Softplus(a) => accumulate(grads, a, g.zip_map(val(a), |gi, xi| gi * sigmoid(xi))),
        Op::Tanh(a) => accumulate(grads, a, g.zip_map(out, |gi, yi| gi * (1.0 - yi * yi))),
        Op::Sqrt(a) => accumulate(grads, a, g.zip_map(out, |gi, yi| gi * 0.5 / yi)),
        Op::Square(a) => accumulate(grads, a, g.zip_map(val(a), |gi, xi| 2.0 * gi * xi)),
        Op::Relu(a) => accumulate(
            grads,
            a,
            g.zip_map(val(a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
        ),
        Op::L2Normalize(a) => {
            let x = val(a);
            let n = *x.shape().last().unwrap();
            let mut gx = vec![0.0; x.numel()];
            for (r, grow) in gx.chunks_mut(n).enumerate() {
                let xr = x.row(r);
                let gr = g.row(r);
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = norm + NORM_EPS;
                let gdotx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                let coef = if norm > 0.0 { gdotx / (norm * s * s) } else { 0.0 };
                for ((o, &gi), &xi) in grow.iter_mut().zip(gr).zip(xr) {
                    *o = gi / s - coef * xi;
                }
            }
            accumulate(grads, a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::SumAll(a) => accumulate(grads, a, Tensor::filled(val(a).shape(), g.item())),
        Op::MeanAll(a) => {
            let x = val(a);
            accumulate(grads, a, Tensor::filled(x.shape(), g.item() / x.numel() as f64));
        }
        Op::MeanAxis(a, axis) => {
            let x = val(a);
            let (outer, mid, inner) = axis_split(x.shape(), axis);
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        gx[(o * mid + m) * inner + i] = g.data()[o * inner + i] / mid as f64;
                    }
                }
            }
            accumulate(grads, a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::MaxLast(a, ref argmax) => {
            let x = val(a);
            let n = *x.shape().last().unwrap();
            let mut gx = vec![0.0; x.numel()];
            for (r, &j) in argmax.iter().enumerate() {
                gx[r * n + j] = g.data()[r];
            }
            accumulate(grads, a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::LogSumExpLast(a) => {
            let x = val(a);
            let n = *x.shape().last().unwrap();
            let mut gx = vec![0.0; x.numel()];
            for (r, grow) in gx.chunks_mut(n).enumerate() {
                let lse = out.data()[r];
                for (o, &xi) in grow.iter_mut().zip(x.row(r)) {
                    *o = g.data()[r] * (xi - lse).exp();
                }
            }
            accumulate(grads, a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Reshape(a) => {
            let shape = val(a).shape().to_vec();
            accumulate(grads, a, Tensor::from_parts(shape, g.data().to_vec()));
        }
        Op::Gather(a, ref idx) => {
            let x = val(a);
            let mut gx = vec![0.0; x.numel()];
            for (k, &i) in idx.iter().enumerate() {
                gx[i] += g.data()[k];
            }
            accumulate(grads, a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::PairwiseSqDist(a) => {
            let x = val(a);
            let (b, c) = x.dims2().unwrap();
            let mut gx = vec![0.0; x.numel()];
            for i in 0..b {
                for j in 0..b {
                    let w = 2.0 * (g.data()[i * b + j] + g.data()[j * b + i]);
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..c {
                        gx[i * c + k] += w * (x.data()[i * c + k] - x.data()[j * c + k]);
                    }
                }
            }
            accumulate(grads, a, Tensor::from_parts(vec![b, c], gx));
        }
    }
}

/// Same-shape zip, or zip against a single broadcast element of `other`.
fn broadcast_zip(lhs: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.numel() == 1 && lhs.numel() != 1 {
        let s = other.item();
        lhs.map(|v| f(v, s))
    } else if lhs.numel() == 1 && other.numel() != 1 {
        let s = lhs.item();
        Tensor::from_parts(other.shape().to_vec(), other.data().iter().map(|&o| f(s, o)).collect())
    } else {
        lhs.zip_map(other, f)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of an element-wise binary op with scalar broadcasting.
fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

// Arithmetic is fallible on shape mismatch, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn unary(self, stage: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(stage, v, op)
    }

    fn binary(
        self,
        rhs: Var<'t>,
        stage: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let shape = binary_shape(stage, &a, &b)?;
        let out = if a.shape() == b.shape() {
            a.zip_map(&b, f)
        } else {
            Tensor::from_parts(shape, broadcast_zip(&a, &b, f).into_data())
        };
        self.tape.push(stage, out, op)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        if rhs.value().data().contains(&0.0) {
            return Err(Error::ZeroDenominator { op: "div" });
        }
        self.binary(rhs, "div", |a, b| a / b, Op::Div(self.id, rhs.id))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + s, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", |v| v * s, Op::MulScalar(self.id, s))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (Some((m, k)), Some((k2, n))) = (a.dims2(), b.dims2()) else {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n));
        self.tape.push("matmul", out, Op::MatMul(self.id, rhs.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        let Some((r, c)) = a.dims2() else {
            return Err(Error::shape("transpose", a.shape(), &[]));
        };
        let out = Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c));
        self.tape.push("transpose", out, Op::Transpose(self.id))
    }

    /// Adds the vector `bias[n]` to every row of `self[m, n]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        match (a.dims2(), b.shape()) {
            (Some((_, n)), &[bn]) if n == bn => {}
            _ => return Err(Error::shape("add_bias", a.shape(), b.shape())),
        }
        let n = b.numel();
        let mut out = a.into_data();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let shape = self.shape();
        self.tape.push(
            "add_bias",
            Tensor::from_parts(shape, out),
            Op::AddBias(self.id, bias.id),
        )
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("ln of a non-positive value"));
        }
        self.unary("ln", f64::ln, Op::Ln(self.id))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, Op::Softplus(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("sqrt of a non-positive value"));
        }
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |v| v * v, Op::Square(self.id))
    }

    /// `max(x, 0)` element-wise.
    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    /// Divides each slice along the last axis by its l2 norm (plus [`NORM_EPS`]).
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out = x.into_data();
        for row in out.chunks_mut(n) {
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape();
        self.tape
            .push("l2_normalize", Tensor::from_parts(shape, out), Op::L2Normalize(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape
            .push("sum", Tensor::from_parts(vec![1], vec![s]), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.tape
            .push("mean", Tensor::from_parts(vec![1], vec![s]), Op::MeanAll(self.id))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.shape().len() {
            return Err(Error::shape("mean_axis", x.shape(), &[axis]));
        }
        let (outer, mid, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * mid + m) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= mid as f64);
        let mut shape: Vec<usize> = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape
            .push("mean_axis", Tensor::from_parts(shape, out), Op::MeanAxis(self.id, axis))
    }

    /// Maximum along the last axis. Ties resolve to the lowest index.
    pub fn max_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let rows = x.numel() / n;
        let mut argmax = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (j, m) = x
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            argmax.push(j);
            out.push(m);
        }
        let shape = reduced_last(x.shape());
        self.tape
            .push("max_last", Tensor::from_parts(shape, out), Op::MaxLast(self.id, argmax))
    }

    /// `ln Σ exp` along the last axis, max-subtracted.
    pub fn logsumexp_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let rows = x.numel() / n;
        let out = (0..rows)
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let shape = reduced_last(x.shape());
        self.tape.push(
            "logsumexp_last",
            Tensor::from_parts(shape, out),
            Op::LogSumExpLast(self.id),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.push("reshape", v, Op::Reshape(self.id))
    }

    /// Picks elements by flat (row-major) index into a vector.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::shape("gather", x.shape(), &[bad]));
        }
        let out = indices.iter().map(|&i| x.data()[i]).collect();
        self.tape.push(
            "gather",
            Tensor::from_parts(vec![indices.len()], out),
            Op::Gather(self.id, indices.to_vec()),
        )
    }

    /// For `self[m, n]`, picks column `cols[i]` from row `i`.
    pub fn pick_per_row(self, cols: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[m, n] = &shape[..] else {
            return Err(Error::shape("pick_per_row", &shape, &[cols.len()]));
        };
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::shape("pick_per_row", &shape, &[cols.len()]));
        }
        let flat: Vec<usize> = cols.iter().enumerate().map(|(i, &c)| i * n + c).collect();
        self.gather(&flat)
    }

    /// Squared Euclidean distances between all rows of `self[b, c]`, as `[b, b]`.
    pub fn pairwise_sq_dist(self) -> Result<Var<'t>> {
        let x = self.value();
        let Some((b, c)) = x.dims2() else {
            return Err(Error::shape("pairwise_sq_dist", x.shape(), &[]));
        };
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                out[i * b + j] = (0..c)
                    .map(|k| {
                        let d = x.data()[i * c + k] - x.data()[j * c + k];
                        d * d
                    })
                    .sum();
            }
        }
        self.tape.push(
            "pairwise_sq_dist",
            Tensor::from_parts(vec![b, b], out),
            Op::PairwiseSqDist(self.id),
        )
    }
}

fn reduced_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}
