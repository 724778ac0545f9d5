//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers. Only nodes reachable from a
//! `param` leaf carry gradients.

use crate::error::{Error, Result};
use crate::netcore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x[B,in] · w[out,in]ᵀ + b[out]`
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LogSoftmax(Var),
    SumRows(Var),
    PickRows(Var, Vec<usize>),
    RowStd(Var),
    Mean(Var),
    Sum(Var),
    /// Forward-only primitive; differentiating through it is a capability error.
    Opaque(&'static str),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.ndim() != 2 || bv.ndim() != 1 {
            return Err(Error::shape("affine expects w[out,in] and b[out]"));
        }
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        if bv.len() != out || xv.cols() != inp || xv.ndim() > 2 {
            return Err(Error::shape(format!(
                "affine input {:?} against weight {:?} and bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * out);
        for i in 0..rows {
            let xi = xv.row(i);
            for o in 0..out {
                data.push(bv.data()[o] + dot(xi, wv.row(o)));
            }
        }
        let shape = if xv.ndim() == 1 { vec![out] } else { vec![rows, out] };
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Affine { x, w, b }, needs))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| c * v)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Row-wise log-softmax, stabilised by subtracting the row maximum.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..av.rows() {
            let row = value.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(a);
        self.push(value, Op::LogSoftmax(a), needs)
    }

    /// Sum over the last axis: `[B,K] -> [B]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let needs = self.needs(a);
        self.push(Tensor::vector(data), Op::SumRows(a), needs)
    }

    /// `out[i] = a[i, labels[i]]`.
    pub fn pick_rows(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if labels.len() != av.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} rows",
                labels.len(),
                av.rows()
            )));
        }
        let k = av.cols();
        let mut data = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::shape(format!("label {y} out of range for {k} classes")));
            }
            data.push(av.row(i)[y]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::vector(data), Op::PickRows(a, labels.to_vec()), needs))
    }

    /// Population standard deviation of each row: `[B,K] -> [B]`.
    pub fn row_std(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|i| population_std(av.row(i))).collect();
        let needs = self.needs(a);
        self.push(Tensor::vector(data), Op::RowStd(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.sum() / av.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Elementwise sign with `sgn(0) = 0`. Forward only.
    pub fn sign(&mut self, a: Var) -> Var {
        self.unary(a, Op::Opaque("sign"), sign)
    }

    /// Runs the backward pass from a single-element node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.rows();
                    let gd = g.data();
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(xv.shape());
                        for i in 0..rows {
                            let dxi = dx.row_mut(i);
                            for o in 0..out_dim {
                                let go = gd[i * out_dim + o];
                                if go != 0.0 {
                                    axpy(dxi, go, wv.row(o));
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = Tensor::zeros(&[out_dim, in_dim]);
                        for i in 0..rows {
                            let xi = xv.row(i);
                            for o in 0..out_dim {
                                let go = gd[i * out_dim + o];
                                if go != 0.0 {
                                    axpy(dw.row_mut(o), go, xi);
                                }
                            }
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; out_dim];
                        for i in 0..rows {
                            for (d, &go) in db.iter_mut().zip(&gd[i * out_dim..(i + 1) * out_dim]) {
                                *d += go;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::vector(db));
                    }
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gi, t| gi * (1.0 - t * t))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gi, e| gi * e)?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let d = g.zip_map(self.value(*b), |gi, y| gi * y)?;
                        accumulate(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let d = g.zip_map(self.value(*a), |gi, x| gi * x)?;
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| c * v));
                }
                Op::LogSoftmax(a) => {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let total: f64 = g.row(i).iter().sum();
                        let logp = node.value.row(i);
                        for (di, &lp) in d.row_mut(i).iter_mut().zip(logp) {
                            *di -= lp.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumRows(a) => {
                    let av = self.value(*a);
                    let k = av.cols();
                    let mut d = Tensor::zeros(av.shape());
                    for (i, &gi) in g.data().iter().enumerate() {
                        d.row_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    debug_assert_eq!(d.len(), g.len() * k);
                    accumulate(&mut grads, *a, d);
                }
                Op::PickRows(a, labels) => {
                    let mut d = Tensor::zeros(self.value(*a).shape());
                    for (i, (&gi, &y)) in g.data().iter().zip(labels).enumerate() {
                        d.row_mut(i)[y] = gi;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::RowStd(a) => {
                    let av = self.value(*a);
                    let k = av.cols() as f64;
                    let mut d = Tensor::zeros(av.shape());
                    for i in 0..av.rows() {
                        let s = node.value.data()[i];
                        // Non-differentiable at s = 0; the zero subgradient is used there.
                        if s == 0.0 {
                            continue;
                        }
                        let coef = g.data()[i] / (k * s);
                        for (di, c) in d.row_mut(i).iter_mut().zip(centered(av.row(i))) {
                            *di = coef * c;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let v = g.data()[0] / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(av.shape(), v));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(av.shape(), g.data()[0]));
                }
                Op::Opaque(name) => return Err(Error::Capability(name)),
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .axpy(1.0, &d)
            .expect("gradient shapes agree with node values"),
        slot @ None => *slot = Some(d),
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let (x, y) = (&a[c * 4..c * 4 + 4], &b[c * 4..c * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Deviations from the row mean, computed relative to the first element so
/// that a constant row gives exact zeros.
fn centered(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let first = row.first().copied().unwrap_or(0.0);
    let m = row.iter().map(|&u| u - first).sum::<f64>() / row.len() as f64;
    row.iter().map(move |&u| (u - first) - m)
}

pub(crate) fn population_std(row: &[f64]) -> f64 {
    (centered(row).map(|d| d * d).sum::<f64>() / row.len() as f64).sqrt()
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
