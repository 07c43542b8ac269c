use std::sync::Arc;

use crate::array::Array;
use crate::error::{shape_error, AutodiffError, Result};
use crate::kernels;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Arc<[usize]>),
    Pick(Var, Arc<[usize]>),
    Permute(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    L1(Var),
    L2(Var),
    Reshape(Var),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation record.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// users and a reverse sweep is a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; the zero array when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Array {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Array::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Array::zeros(shape),
        }
    }

    /// True when some gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_error(op, format!("{:?}", a.shape()), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_error(op, "a 2-D array", a.shape())),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Adds vector `v` (length D) to every row of `x` (shape `[.., D]`).
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (vx, vv) = (self.value(x), self.value(v));
        if vv.shape().len() != 1 || vv.len() != vx.last_dim() {
            return Err(shape_error("add_row", format!("[{}]", vx.last_dim()), vv.shape()));
        }
        let mut value = vx.clone();
        kernels::add_row_inplace(value.data_mut(), vv.data());
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, Op::AddRow(x, v), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_error("matmul", format!("[{k}, _]"), self.value(b).shape()));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), kernels::softplus)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = kernels::softmax_rows(vx.data(), vx.last_dim());
        let value = Array::new(vx.shape().to_vec(), data).expect("softmax shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = kernels::log_softmax_rows(vx.data(), vx.last_dim());
        let value = Array::new(vx.shape().to_vec(), data).expect("log_softmax shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Embedding lookup: rows `indices` of a `[V, D]` table, giving `[len, D]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims("gather_rows", self.value(table))?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(AutodiffError::Index {
                    op: "gather_rows",
                    index: i,
                    size: v,
                });
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Array::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, indices.into()), rg))
    }

    /// Selects `x[i, indices[i]]` from a `[N, K]` array, giving `[N]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (n, k) = matrix_dims("pick", self.value(x))?;
        if indices.len() != n {
            return Err(shape_error("pick", format!("{n} indices"), &[indices.len()]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n);
        for (row, &j) in indices.iter().enumerate() {
            if j >= k {
                return Err(AutodiffError::Index {
                    op: "pick",
                    index: j,
                    size: k,
                });
            }
            data.push(src[row * k + j]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Array::vector(data), Op::Pick(x, indices.into()), rg))
    }

    /// `out.flat[i] = x.flat[map[i]]`, reshaped to `shape`.
    pub fn permute(&mut self, x: Var, map: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if map.len() != shape.iter().product::<usize>() {
            return Err(shape_error("permute", format!("{} map entries", map.len()), shape));
        }
        let mut data = Vec::with_capacity(map.len());
        for &i in map.iter() {
            if i >= src.len() {
                return Err(AutodiffError::Index {
                    op: "permute",
                    index: i,
                    size: src.len(),
                });
            }
            data.push(src[i]);
        }
        let value = Array::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Permute(x, map), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Array::scalar(vx.sum() / vx.len() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum over the last axis: `[.., D] -> [..]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let data = vx.data().chunks(d).map(|r| r.iter().sum()).collect();
        let shape = vx.shape()[..vx.shape().len().saturating_sub(1)].to_vec();
        let value = Array::new(shape, data).expect("sum_rows shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SumRows(x), rg)
    }

    /// Mean over the last axis: `[.., D] -> [..]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let data = vx
            .data()
            .chunks(d)
            .map(|r| r.iter().sum::<f64>() / d as f64)
            .collect();
        let shape = vx.shape()[..vx.shape().len().saturating_sub(1)].to_vec();
        let value = Array::new(shape, data).expect("mean_rows shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanRows(x), rg)
    }

    /// `Σ |x|` as a scalar.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::L1(x), rg)
    }

    /// `sqrt(Σ x²)` as a scalar; the gradient at the origin is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let ss: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Array::scalar(ss.sqrt()), Op::L2(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Identity in the forward pass, zero in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contrib: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], f: impl Fn(usize) -> f64) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let contrib = g.iter().enumerate().map(|(i, gi)| gi * f(i)).collect();
        self.accumulate(grads, x, contrib);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.elementwise(grads, *a, g, |k| vb[k]);
                self.elementwise(grads, *b, g, |k| va[k]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.elementwise(grads, *a, g, |k| 1.0 / vb[k]);
                self.elementwise(grads, *b, g, |k| -va[k] / (vb[k] * vb[k]));
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.elementwise(grads, *a, g, |k| if va[k] <= vb[k] { 1.0 } else { 0.0 });
                self.elementwise(grads, *b, g, |k| if va[k] <= vb[k] { 0.0 } else { 1.0 });
            }
            Op::AddRow(x, v) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.nodes[v.0].requires_grad {
                    let d = self.value(*v).len();
                    let mut acc = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (a, r) in acc.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    self.accumulate(grads, *v, acc);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, vb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, kernels::matmul_tn(va.data(), g, m, k, n));
                }
            }
            Op::Scale(x, c) => self.elementwise(grads, *x, g, |_| *c),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Tanh(x) => self.elementwise(grads, *x, g, |k| 1.0 - y[k] * y[k]),
            Op::Sigmoid(x) => self.elementwise(grads, *x, g, |k| y[k] * (1.0 - y[k])),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.elementwise(grads, *x, g, |k| if vx[k] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Exp(x) => self.elementwise(grads, *x, g, |k| y[k]),
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.elementwise(grads, *x, g, |k| 1.0 / vx[k])
            }
            Op::Sqrt(x) => self.elementwise(grads, *x, g, |k| 0.5 / y[k]),
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                self.elementwise(grads, *x, g, |k| {
                    if vx[k] > 0.0 {
                        1.0
                    } else if vx[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Square(x) => {
                let vx = self.value(*x).data();
                self.elementwise(grads, *x, g, |k| 2.0 * vx[k])
            }
            Op::Softplus(x) => {
                let vx = self.value(*x).data();
                self.elementwise(grads, *x, g, |k| kernels::sigmoid(vx[k]))
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x).data();
                self.elementwise(grads, *x, g, |k| {
                    if vx[k] >= *lo && vx[k] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut contrib = vec![0.0; g.len()];
                for ((gr, yr), cr) in g.chunks(d).zip(y.chunks(d)).zip(contrib.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((c, gv), yv) in cr.iter_mut().zip(gr).zip(yr) {
                        *c = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, contrib);
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                let mut contrib = vec![0.0; g.len()];
                for ((gr, yr), cr) in g.chunks(d).zip(y.chunks(d)).zip(contrib.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for ((c, gv), yv) in cr.iter_mut().zip(gr).zip(yr) {
                        *c = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, *x, contrib);
            }
            Op::GatherRows(table, idx) => {
                if self.nodes[table.0].requires_grad {
                    let vt = self.value(*table);
                    let d = vt.shape()[1];
                    let mut acc = vec![0.0; vt.len()];
                    for (row, &t) in idx.iter().enumerate() {
                        for (a, gv) in acc[t * d..(t + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *a += gv;
                        }
                    }
                    self.accumulate(grads, *table, acc);
                }
            }
            Op::Pick(x, idx) => {
                if self.nodes[x.0].requires_grad {
                    let vx = self.value(*x);
                    let k = vx.shape()[1];
                    let mut acc = vec![0.0; vx.len()];
                    for (row, &j) in idx.iter().enumerate() {
                        acc[row * k + j] = g[row];
                    }
                    self.accumulate(grads, *x, acc);
                }
            }
            Op::Permute(x, map) => {
                if self.nodes[x.0].requires_grad {
                    let mut acc = vec![0.0; self.value(*x).len()];
                    for (gv, &src) in g.iter().zip(map.iter()) {
                        acc[src] += gv;
                    }
                    self.accumulate(grads, *x, acc);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                let s = if matches!(node.op, Op::MeanRows(_)) { 1.0 / d as f64 } else { 1.0 };
                let contrib = (0..vx.len()).map(|k| g[k / d] * s).collect();
                self.accumulate(grads, *x, contrib);
            }
            Op::L1(x) => {
                let vx = self.value(*x).data();
                self.elementwise(grads, *x, &vec![g[0]; vx.len()], |k| {
                    if vx[k] > 0.0 {
                        1.0
                    } else if vx[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::L2(x) => {
                let vx = self.value(*x).data();
                let norm = y[0];
                if norm > 0.0 {
                    self.elementwise(grads, *x, &vec![g[0]; vx.len()], |k| vx[k] / norm)
                } else {
                    self.accumulate(grads, *x, vec![0.0; vx.len()]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item(), 9.0);
        assert_eq!(t.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn unused_input_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![1.0, 2.0]));
        let c = t.constant(Array::scalar(5.0));
        let y = t.scale(c, 2.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x), Array::zeros(&[2]));
        assert!(!g.reached(x));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![1.0, 2.0]));
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(AutodiffError::NonScalarOutput(_))));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![1.5, -2.0]));
        let s = t.stop_gradient(x);
        assert_eq!(t.value(s), t.value(x));
        let y = t.mul(s, x).unwrap();
        let y = t.sum(y);
        // d/dx (sg(x)·x) = sg(x)
        assert_eq!(t.backward(y).unwrap().wrt(x).data(), &[1.5, -2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.param(Array::zeros(&[2, 3]));
        let b = t.param(Array::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"), "{err}");
        let c = t.param(Array::zeros(&[3]));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn relu_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![0.0, 1.0, -1.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Array::zeros(&[4]));
        let p = t.softmax(x);
        assert_eq!(t.value(p).data(), &[0.25; 4]);
    }

    #[test]
    fn gather_out_of_range() {
        let mut t = Tape::new();
        let table = t.param(Array::zeros(&[3, 2]));
        assert!(matches!(t.gather_rows(table, &[3]), Err(AutodiffError::Index { .. })));
    }
}
