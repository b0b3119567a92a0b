//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every op as a node in creation order, which is already
//! a topological order. [`Graph::backward`] walks the nodes once in reverse.
//! Frozen parameters enter the graph as constants and never receive gradients.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, AttnShape};
use super::tensor::{Param, Real, Tensor};
use crate::error::{Error, Result};
use crate::parallel::Exec;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(Arc<str>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    Extremum(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        shape: AttnShape,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of every trainable parameter that entered a graph, keyed by
/// parameter name. Parameters used more than once accumulate.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<Arc<str>, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| &**k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (&**k, v))
    }

    /// Adds `other` into `self` (used to sum per-chunk gradients).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (k, v) in &other.map {
            match self.map.get_mut(k) {
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(v.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    exec: Exec,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
            consumed: false,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable parameters become gradient-tracked leaves; frozen ones
    /// become constants.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if p.trainable {
            self.push(p.value.clone(), Op::Param(p.name_arc()), true)
        } else {
            self.push(p.value.clone(), Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err(format!("matmul inner dims {m}×{k} · {k2}×{n}")));
        }
        let c = kernels::matmul(self.exec, self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = match op {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            _ => "mul",
        };
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Broadcast-adds a `[n]` or `[1×n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).len() != n {
            return Err(dim_err(format!(
                "add_row: row of {} elements for {n} columns",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// `x·W + b` for `x: [m×k]`, `W: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(dim_err(format!(
                "mul_const: {} constants for {} elements",
                c.len(),
                self.value(a).len()
            )));
        }
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(a), rg)
    }

    /// Standardizes each last-axis row, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(dim_err(format!("layer_norm: affine params must have {d} elements")));
        }
        if !(eps > T::zero()) {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + bt[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat_rows of nothing".into()))?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(dim_err(format!("concat_rows: {} vs {n} columns", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat_cols of nothing".into()))?;
        let m = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(dim_err("concat_cols: row counts differ".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if len == 0 || start + len > n {
            return Err(dim_err(format!("slice_cols {start}+{len} out of {n} columns")));
        }
        let src = self.value(a).data();
        let data = (0..m)
            .flat_map(|r| src[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x: a, start }, rg))
    }

    /// Selects (and may repeat) rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(dim_err("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(dim_err(format!("gather_rows index {bad} out of {m} rows")));
        }
        let src = t.data();
        let data = idx.iter().flat_map(|&i| src[i * n..(i + 1) * n].iter().copied()).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn rows_range(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Largest element. Ties resolve to the first occurrence.
    pub fn max(&mut self, a: Var) -> Var {
        self.extremum(a, |x, best| x > best)
    }

    /// Smallest element. Ties resolve to the first occurrence.
    pub fn min(&mut self, a: Var) -> Var {
        self.extremum(a, |x, best| x < best)
    }

    fn extremum(&mut self, a: Var, better: impl Fn(T, T) -> bool) -> Var {
        let d = self.value(a).data();
        let mut at = 0;
        for (i, &x) in d.iter().enumerate() {
            if better(x, d[at]) {
                at = i;
            }
        }
        let v = d[at];
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Extremum(a, at), rg)
    }

    /// Multi-head scaled dot-product attention over `batch` sequences stacked
    /// as `[batch·seq × width]`. An optional prefix key/value pair (`[1×width]`
    /// shared, or `[batch×width]` per sequence) is prepended to every
    /// sequence's keys and values; it is visible to all queries and produces
    /// no output row.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        batch: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (rows, width) = self.dims2(q)?;
        self.same_shape(q, k, "attention k")?;
        self.same_shape(q, v, "attention v")?;
        if batch == 0 || rows % batch != 0 {
            return Err(dim_err(format!("attention: {rows} rows not divisible into {batch} sequences")));
        }
        if heads == 0 || width % heads != 0 {
            return Err(dim_err(format!("attention: width {width} not divisible by {heads} heads")));
        }
        let prefix_rows = match prefix {
            None => 0,
            Some((pk, pv)) => {
                self.same_shape(pk, pv, "attention prefix")?;
                let (r, c) = self.dims2(pk)?;
                if c != width || (r != 1 && r != batch) {
                    return Err(dim_err(format!(
                        "attention prefix shape [{r}×{c}] for batch {batch}, width {width}"
                    )));
                }
                r
            }
        };
        let shape = AttnShape {
            batch,
            seq: rows / batch,
            heads,
            width,
            causal,
            prefix_rows,
        };
        let pre = prefix.map(|(pk, pv)| (self.value(pk).data(), self.value(pv).data()));
        let (out, probs) = kernels::attention_forward(
            self.exec,
            shape,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            pre,
        );
        let rg = self.rg(q)
            || self.rg(k)
            || self.rg(v)
            || prefix.is_some_and(|(a, b)| self.rg(a) || self.rg(b));
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                prefix,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Numeric(format!("loss is {}", self.value(loss).item())));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                if let Op::Param(name) = &self.nodes[id].op {
                    out.map
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape()));
                }
                continue;
            };
            self.backprop_node(id, g, &mut grads, &mut out)?;
        }
        for (name, t) in out.iter() {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        id: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let exec = self.exec;
        let mut acc = |v: Var, d: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => {
                    for (a, b) in e.iter_mut().zip(d) {
                        *a += b;
                    }
                }
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.map.get_mut(name) {
                    Some(e) => {
                        for (a, &b) in e.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.map.insert(name.clone(), t);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if needs(*a) {
                    acc(*a, kernels::matmul_nt(exec, &g, val(*b).data(), m, n, k));
                }
                if needs(*b) {
                    acc(*b, kernels::matmul_tn(exec, val(*a).data(), &g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|&x| -x).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                if needs(*row) {
                    let n = val(*row).len();
                    let mut dr = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        for (d, &x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    acc(*row, dr);
                }
                acc(*a, g);
            }
            Op::MulConst(a, c) => acc(*a, g.iter().zip(c).map(|(&x, &y)| x * y).collect()),
            Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::Gelu(a) => acc(
                *a,
                g.iter().zip(val(*a).data()).map(|(&x, &v)| x * gelu_grad(v)).collect(),
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gm = val(*gamma).data();
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if needs(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<T> = (0..d).map(|c| gr[c] * gm[c]).collect();
                        let m1 = dh.iter().copied().sum::<T>() / dn;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for c in 0..d {
                            dx[r * d + c] = rstd[r] * (dh[c] - m1 - hr[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let s = kernels::dot(gr, yr);
                    for c in 0..d {
                        dr[c] = yr[c] * (gr[c] - s);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let s = gr.iter().copied().sum::<T>();
                    for c in 0..d {
                        dr[c] = gr[c] - yr[c].exp() * s;
                    }
                }
                acc(*a, dx);
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => acc(*a, g),
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, g[at..at + n].to_vec());
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let d = (0..m)
                            .flat_map(|r| g[r * n + start..r * n + start + w].iter().copied())
                            .collect();
                        acc(p, d);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let w = node.value.cols();
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.cols();
                let mut dx = vec![T::zero(); val(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &v) in dx[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::MeanAll(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Extremum(a, at) => {
                let mut dx = vec![T::zero(); val(*a).len()];
                dx[*at] = g[0];
                acc(*a, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                prefix,
                shape,
                probs,
            } => {
                let pre = prefix.map(|(pk, pv)| (val(pk).data(), val(pv).data()));
                let gr = kernels::attention_backward(
                    exec,
                    *shape,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    pre,
                    probs,
                    &g,
                );
                acc(*q, gr.dq);
                acc(*k, gr.dk);
                acc(*v, gr.dv);
                if let (Some((pk, pv)), Some((dpk, dpv))) = (prefix, gr.dprefix) {
                    acc(*pk, dpk);
                    acc(*pv, dpv);
                }
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
