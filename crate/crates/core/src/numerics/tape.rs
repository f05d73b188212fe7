//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward evaluation. Leaves are
//! either borrowed (frozen weights, read without copying) or owned. A node
//! needs a gradient when any of its inputs does, so frozen subgraphs are
//! never visited during [`Tape::backward`].

use std::borrow::Cow;

use super::activation::{gelu, gelu_grad};
use super::matrix::{dot, softmax, Matrix};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    SelectCols {
        x: usize,
        idx: Vec<usize>,
    },
    MeanRows(usize),
    ExpandRows(usize),
    Row {
        x: usize,
        row: usize,
    },
    CrossEntropy {
        logits: usize,
        target: usize,
        active: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftmaxMass {
        x: usize,
        selected: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!(
        "{}: {}x{} with {}x{}",
        what, a.0, a.1, b.0, b.1
    ))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// Borrowed leaf; no copy of the weights is made.
    pub fn leaf(&mut self, value: &'a Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn owned_leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::MatMulNt(a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), ng))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(dim_err("add_row", av.shape(), bv.shape()));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (o, v) in value.row_mut(i).iter_mut().zip(bv.row(0)) {
                *o += v;
            }
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::AddRow(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a.0);
        self.push(value, Op::Scale(a.0, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a.0);
        self.push(value, Op::Gelu(a.0), ng)
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = Matrix::zeros(xv.rows(), d);
        let mut out = Matrix::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * gv.get(0, j) + bv.get(0, j));
            }
        }
        let ng = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            let row = av.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("attention logits".into()));
            }
            value.row_mut(i).copy_from_slice(&softmax(row));
        }
        let ng = self.needs(a.0);
        Ok(self.push(value, Op::SoftmaxRows(a.0), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).column_slice(start, len)?;
        let ng = self.needs(a.0);
        Ok(self.push(value, Op::SliceCols { x: a.0, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|v| self.needs(v.0));
        Ok(self.push(
            value,
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let ng = parts.iter().any(|v| self.needs(v.0));
        Ok(self.push(
            value,
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            ng,
        ))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        let ng = self.needs(a.0);
        Ok(self.push(
            value,
            Op::SelectRows {
                x: a.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), idx.len());
        for (o, &c) in idx.iter().enumerate() {
            if c >= av.cols() {
                return Err(Error::OutOfRange(format!(
                    "column {} of {} columns",
                    c,
                    av.cols()
                )));
            }
            for i in 0..av.rows() {
                value.set(i, o, av.get(i, c));
            }
        }
        let ng = self.needs(a.0);
        Ok(self.push(
            value,
            Op::SelectCols {
                x: a.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let ng = self.needs(a.0);
        self.push(value, Op::MeanRows(a.0), ng)
    }

    /// Replicates a `1 x c` row `n` times.
    pub fn expand_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::Dimension(format!(
                "expand_rows needs a single row, got {}",
                av.rows()
            )));
        }
        let mut value = Matrix::zeros(n, av.cols());
        for i in 0..n {
            value.row_mut(i).copy_from_slice(av.row(0));
        }
        let ng = self.needs(a.0);
        Ok(self.push(value, Op::ExpandRows(a.0), ng))
    }

    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let value = self.value(a).select_rows(&[row])?;
        let ng = self.needs(a.0);
        Ok(self.push(value, Op::Row { x: a.0, row }, ng))
    }

    /// Cross-entropy of a `1 x C` logit row, normalized over `active` columns only.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, active: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(Error::Dimension("cross_entropy expects one row".into()));
        }
        let pos = active.iter().position(|&c| c == target).ok_or_else(|| {
            Error::OutOfRange(format!("target {} not among active classes", target))
        })?;
        if let Some(&bad) = active.iter().find(|&&c| c >= lv.cols()) {
            return Err(Error::OutOfRange(format!(
                "class {} of {} logits",
                bad,
                lv.cols()
            )));
        }
        let sub: Vec<f64> = active.iter().map(|&c| lv.get(0, c)).collect();
        if sub.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        let probs = softmax(&sub);
        let loss = -probs[pos].ln();
        let ng = self.needs(logits.0);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                target: pos,
                active: active.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Softmax mass of a `1 x n` row falling on `selected` columns.
    pub fn softmax_mass(&mut self, a: Var, selected: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::Dimension("softmax_mass expects one row".into()));
        }
        if let Some(&bad) = selected.iter().find(|&&c| c >= av.cols()) {
            return Err(Error::OutOfRange(format!(
                "column {} of {} columns",
                bad,
                av.cols()
            )));
        }
        let probs = softmax(av.row(0));
        let mass: f64 = selected.iter().map(|&c| probs[c]).sum();
        let ng = self.needs(a.0);
        Ok(self.push(
            Matrix::scalar(mass),
            Op::SoftmaxMass {
                x: a.0,
                selected: selected.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("sum of zero terms".into()))?;
        let mut value = self.value(*first).clone();
        for p in &parts[1..] {
            value.add_assign(self.value(*p))?;
        }
        let ng = parts.iter().any(|v| self.needs(v.0));
        Ok(self.push(value, Op::Sum(parts.iter().map(|v| v.0).collect()), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward from a {}x{} node",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], target: usize, delta: Matrix) -> Result<()> {
        if !self.nodes[target].needs_grad {
            return Ok(());
        }
        match &mut grads[target] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |i: usize| -> &Matrix { &self.nodes[i].value };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(val(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Gelu(a) => {
                let x = val(*a);
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *o *= gelu_grad(xv);
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let d = xhat.cols();
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(xhat.rows(), d);
                    for i in 0..xhat.rows() {
                        let dxhat: Vec<f64> =
                            (0..d).map(|j| g.get(i, j) * gv.get(0, j)).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dot(&dxhat, xhat.row(i));
                        for j in 0..d {
                            let v = inv_std[i] / d as f64
                                * (d as f64 * dxhat[j] - sum_d - xhat.get(i, j) * sum_dx);
                            dx.set(i, j, v);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if self.needs(*gamma) {
                    let mut dg = Matrix::zeros(1, d);
                    for i in 0..xhat.rows() {
                        for j in 0..d {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    self.accumulate(grads, *gamma, dg)?;
                }
                if self.needs(*beta) {
                    let mut db = Matrix::zeros(1, d);
                    for i in 0..xhat.rows() {
                        for (o, v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *beta, db)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let inner = dot(g.row(i), y.row(i));
                    for j in 0..y.cols() {
                        d.set(i, j, y.get(i, j) * (g.get(i, j) - inner));
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let xv = val(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *x, d)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.column_slice(offset, c)?)?;
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if self.needs(p) {
                        let idx: Vec<usize> = (offset..offset + r).collect();
                        self.accumulate(grads, p, g.select_rows(&idx)?)?;
                    }
                    offset += r;
                }
            }
            Op::SelectRows { x, idx: rows } => {
                if self.needs(*x) {
                    let xv = val(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (o, &r) in rows.iter().enumerate() {
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(o)) {
                            *dv += gv;
                        }
                    }
                    self.accumulate(grads, *x, d)?;
                }
            }
            Op::SelectCols { x, idx: cols } => {
                if self.needs(*x) {
                    let xv = val(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        for (o, &c) in cols.iter().enumerate() {
                            let cur = d.get(i, c);
                            d.set(i, c, cur + g.get(i, o));
                        }
                    }
                    self.accumulate(grads, *x, d)?;
                }
            }
            Op::MeanRows(a) => {
                let n = val(*a).rows();
                let mut d = Matrix::zeros(n, g.cols());
                let inv = 1.0 / n as f64;
                for i in 0..n {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = v * inv;
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::ExpandRows(a) => {
                let mut d = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, v) in d.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::Row { x, row } => {
                if self.needs(*x) {
                    let xv = val(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    d.row_mut(*row).copy_from_slice(g.row(0));
                    self.accumulate(grads, *x, d)?;
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                active,
                probs,
            } => {
                let scale = g.item();
                let mut d = Matrix::zeros(1, val(*logits).cols());
                for (k, &c) in active.iter().enumerate() {
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    d.set(0, c, scale * (probs[k] - onehot));
                }
                self.accumulate(grads, *logits, d)?;
            }
            Op::SoftmaxMass { x, selected, probs } => {
                let scale = g.item();
                let mass: f64 = selected.iter().map(|&c| probs[c]).sum();
                let mut d = Matrix::zeros(1, probs.len());
                for (j, &p) in probs.iter().enumerate() {
                    d.set(0, j, -scale * p * mass);
                }
                for &c in selected {
                    let cur = d.get(0, c);
                    d.set(0, c, cur + scale * probs[c]);
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone())?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Central differences on every entry of `x` for a scalar-valued builder.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let up = f(&p);
            p.data_mut()[k] -= 2.0 * h;
            let down = f(&p);
            out.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out
    }

    fn check(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.owned_leaf(m.clone(), true);
            let out = build(&mut t, v);
            t.value(out).item()
        };
        let mut t = Tape::new();
        let v = t.owned_leaf(x.clone(), true);
        let out = build(&mut t, v);
        let grads = t.backward(out).unwrap();
        let analytic = grads.get(v).unwrap();
        let numeric = numeric_grad(&x, &eval);
        let err = analytic.max_abs_diff(&numeric).unwrap();
        assert!(err < 1e-6, "max abs error {}", err);
    }

    fn total(t: &mut Tape, v: Var) -> Var {
        let n = t.value(v).rows();
        let c = t.value(v).cols();
        let ones_r = t.constant(Matrix::filled(1, n, 1.0));
        let ones_c = t.constant(Matrix::filled(c, 1, 1.0));
        let s = t.matmul(ones_r, v).unwrap();
        t.matmul(s, ones_c).unwrap()
    }

    #[test]
    fn grad_layer_norm_softmax_chain() {
        let mut rng = Rng::new(11);
        let x = rng.normal_matrix(3, 5, 1.0);
        let w = rng.normal_matrix(5, 5, 1.0);
        let gamma = rng.normal_matrix(1, 5, 1.0);
        let beta = rng.normal_matrix(1, 5, 1.0);
        check(x, |t, v| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let n = t.layer_norm(v, g, b).unwrap();
            let wv = t.constant(w.clone());
            let m = t.matmul(n, wv).unwrap();
            let s = t.softmax_rows(m).unwrap();
            let sq = t.gelu(s);
            let weights = t.constant(Matrix::from_vec(3, 5, (0..15).map(|k| k as f64 * 0.1).collect()).unwrap());
            let p = t.matmul_nt(sq, weights).unwrap();
            let r = t.row(p, 1).unwrap();
            let r = t.mean_rows(r);
            total(t, r)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = Rng::new(12);
        let x = rng.normal_matrix(4, 6, 1.0);
        check(x, |t, v| {
            let a = t.slice_cols(v, 1, 3).unwrap();
            let b = t.select_rows(v, &[2, 0, 2]).unwrap();
            let bc = t.select_cols(b, &[5, 1, 1]).unwrap();
            let m = t.mean_rows(a);
            let e = t.expand_rows(m, 3).unwrap();
            let c = t.concat_cols(&[e, bc]).unwrap();
            let d = t.concat_rows(&[c, c]).unwrap();
            let s = t.scale(d, 0.7);
            let r = t.row(s, 0).unwrap();
            let ce = t.cross_entropy(r, 2, &[0, 2, 5]).unwrap();
            let r2 = t.row(s, 4).unwrap();
            let sm = t.softmax_mass(r2, &[1, 3]).unwrap();
            let sum = t.sum(&[ce, sm]).unwrap();
            let bias = t.constant(Matrix::filled(1, 1, 0.3));
            t.add_row(sum, bias).unwrap()
        });
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let w = Matrix::identity(2);
        let mut t = Tape::new();
        let frozen = t.leaf(&w, false);
        let x = t.owned_leaf(Matrix::row_vector(&[1.0, 2.0]), true);
        let y = t.matmul(x, frozen).unwrap();
        let loss = t.softmax_mass(y, &[0]).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(frozen).is_none());
        assert!(g.get(x).is_some());
    }
}
