//! Append-only operation tape with reverse-mode differentiation.
//!
//! Every operation pushes one node holding its computed value and the indices
//! of its inputs. Inputs always precede outputs on the tape, so replaying the
//! node list backwards is a valid reverse topological order and each node is
//! visited exactly once.
//!
//! Broadcasting is limited to scalar-with-array: a single-element operand may
//! meet an array of any shape. Row-wise bias addition is expressed through
//! matmul with a column of ones instead.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::{gemm_nn, gemm_nt, gemm_tn, Array};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Powf(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    NormalizeRows(Var),
    RmsNormRows(Var, f64),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded computation record. Build one per forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Copies the current value into a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            return Ok(x.zip_map(y, f));
        }
        if y.is_scalar() {
            let s = y.item();
            return Ok(x.map(|v| f(v, s)));
        }
        if x.is_scalar() {
            let s = x.item();
            return Ok(y.map(|v| f(s, v)));
        }
        Err(Error::shape(op, x.shape(), y.shape()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scaled(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: alloc::format!("argument {bad} is not positive"),
            });
        }
        let value = x.map(libm::log);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// `a^p` for nonnegative `a`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Domain {
                op: "powf",
                detail: alloc::format!("base {bad} is negative"),
            });
        }
        let value = x.map(|v| libm::pow(v, p));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Powf(a, p), rg))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    /// Softmax over the last axis, with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let c = x.cols();
        for r in 0..x.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
            for v in row.iter_mut() {
                *v = *v - m - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = reduce_axis(self.value(a), axis, 1.0)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let n = *x
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Index {
                what: "axis",
                index: axis,
                bound: x.rank(),
            })?;
        let value = reduce_axis(x, axis, 1.0 / n as f64)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanAxis(a, axis), rg))
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Option<usize>) -> Result<Var> {
        match (kind, axis) {
            (ReduceKind::Sum, None) => Ok(self.sum(a)),
            (ReduceKind::Mean, None) => Ok(self.mean(a)),
            (ReduceKind::Sum, Some(ax)) => self.sum_axis(a, ax),
            (ReduceKind::Mean, Some(ax)) => self.mean_axis(a, ax),
        }
    }

    /// Picks rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index {
                    what: "row",
                    index: id,
                    bound: r,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Array::new(&[ids.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Stacks matrices with a common column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let (_, c) = self.matrix_dims("concat_rows", parts[0])?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.matrix_dims("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Array::new(&[rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_rows", a)?;
        if start >= end || end > r {
            return Err(Error::Index {
                what: "slice end",
                index: end,
                bound: r,
            });
        }
        let value = Array::new(
            &[end - start, c],
            self.value(a).data()[start * c..end * c].to_vec(),
        )?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let n = libm::sqrt(row.iter().map(|v| v * v).sum());
            if n == 0.0 {
                return Err(Error::Degenerate(alloc::format!(
                    "row {r} has zero norm and cannot be normalised"
                )));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    /// `x / sqrt(mean(x²) + eps)` per row, without a learned gain.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RmsNormRows(a, eps), rg)
    }

    /// Gradients of the scalar `loss` with respect to each of `params`.
    ///
    /// Nodes that are neither requested nor on a path to a requested node
    /// keep no gradient. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Vec<Array>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Array>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array::ones(lv.shape()));
        let mut keep = vec![false; loss.0 + 1];
        for p in params {
            if p.0 <= loss.0 {
                keep[p.0] = true;
            }
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match if keep[i] { adj[i].clone() } else { adj[i].take() } {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, g, &mut adj)?;
        }
        Ok(params
            .iter()
            .map(|p| match adj.get(p.0).and_then(|a| a.clone()) {
                Some(g) => g,
                None => Array::zeros(self.value(*p).shape()),
            })
            .collect())
    }

    fn accumulate(&self, adj: &mut [Option<Array>], v: Var, g: Array) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        // A scalar operand that was broadcast receives the summed gradient.
        let g = if g.len() != node.value.len() {
            debug_assert!(node.value.is_scalar());
            Array::full(node.value.shape(), g.sum())
        } else if g.shape() != node.value.shape() {
            g.reshape(node.value.shape()).expect("same length")
        } else {
            g
        };
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `g` into rows `start..` of the adjoint of `v`.
    fn accumulate_rows(&self, adj: &mut [Option<Array>], v: Var, start: usize, g: &Array) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let c = node.value.cols();
        let slot = adj[v.0].get_or_insert_with(|| Array::zeros(node.value.shape()));
        for (d, s) in slot.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
            *d += s;
        }
    }

    fn propagate(&self, i: usize, g: Array, adj: &mut [Option<Array>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = out.cols();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(adj, *a, Array::new(&[m, k], ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(adj, *b, Array::new(&[k, n], gb)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = dims2(self.value(*a));
                let n = out.cols();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g.data(), self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(adj, *a, Array::new(&[m, k], ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g.data(), self.value(*a).data(), &mut gb, n, m, k);
                    self.accumulate(adj, *b, Array::new(&[n, k], gb)?);
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()?),
            Op::Reshape(a) => {
                let ga = g.reshape(self.value(*a).shape())?;
                self.accumulate(adj, *a, ga);
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *b, g.clone());
                self.accumulate(adj, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *b, g.scaled(-1.0));
                self.accumulate(adj, *a, g);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(adj, *a, mul_broadcast(&g, y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(adj, *b, mul_broadcast(&g, x));
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.scaled(*c)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g),
            Op::Neg(a) => self.accumulate(adj, *a, g.scaled(-1.0)),
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| g / x);
                self.accumulate(adj, *a, ga);
            }
            Op::Exp(a) => self.accumulate(adj, *a, g.zip_map(out, |g, y| g * y)),
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| 2.0 * x * g);
                self.accumulate(adj, *a, ga);
            }
            Op::Powf(a, p) => {
                let p = *p;
                let ga = g.zip_map(self.value(*a), |g, x| {
                    let d = if x == 0.0 {
                        // Derivative at the boundary: 1 for p = 1, 0 otherwise.
                        if p == 1.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        p * libm::pow(x, p - 1.0)
                    };
                    g * d
                });
                self.accumulate(adj, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(adj, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (j, v) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                        *v = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let gs: f64 = gr.iter().sum();
                    for (j, v) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                        *v = gr[j] - libm::exp(y[j]) * gs;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array::full(self.value(*a).shape(), g.item());
                self.accumulate(adj, *a, ga);
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let ga = Array::full(x.shape(), g.item() / x.len() as f64);
                self.accumulate(adj, *a, ga);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = self.value(*a);
                let n = x.shape()[*axis];
                let c = if matches!(self.nodes[i].op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let (outer, inner) = axis_split(x.shape(), *axis);
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            ga[(o * n + j) * inner + k] = g.data()[o * inner + k] * c;
                        }
                    }
                }
                self.accumulate(adj, *a, Array::new(x.shape(), ga)?);
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let c = t.cols();
                let mut gt = Array::zeros(t.shape());
                for (row, &id) in ids.iter().enumerate() {
                    let src = g.row(row);
                    for (d, s) in gt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(adj, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = shape[0] * c;
                    if self.requires_grad(*p) {
                        let gp = Array::new(&shape, g.data()[offset..offset + n].to_vec())?;
                        self.accumulate(adj, *p, gp);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => self.accumulate_rows(adj, *a, *start, &g),
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = g.clone();
                for r in 0..x.rows() {
                    let n = libm::sqrt(x.row(r).iter().map(|v| v * v).sum());
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (j, v) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                        *v = (gr[j] - y[j] * dot) / n;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::RmsNormRows(a, eps) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = g.clone();
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let inv = 1.0 / libm::sqrt(ms + eps);
                    let dot: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                    let k = dot * inv * inv * inv / c as f64;
                    for (j, v) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                        *v = gr[j] * inv - xr[j] * k;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
        }
        Ok(())
    }
}

fn dims2(a: &Array) -> (usize, usize) {
    (a.shape()[0], a.shape()[1])
}

fn mul_broadcast(g: &Array, other: &Array) -> Array {
    if other.len() == g.len() {
        let mut out = g.clone();
        for (x, o) in out.data_mut().iter_mut().zip(other.data()) {
            *x *= o;
        }
        out
    } else {
        let s = other.item();
        g.scaled(s)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn reduce_axis(x: &Array, axis: usize, c: f64) -> Result<Array> {
    if axis >= x.rank() {
        return Err(Error::Index {
            what: "axis",
            index: axis,
            bound: x.rank(),
        });
    }
    let n = x.shape()[axis];
    let (outer, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            for k in 0..inner {
                out[o * inner + k] += x.data()[(o * n + j) * inner + k];
            }
        }
    }
    if c != 1.0 {
        for v in out.iter_mut() {
            *v *= c;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Array::new(&shape, out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax on a plain array.
pub fn softmax_rows(x: &Array) -> Array {
    let mut out = x.clone();
    let c = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
