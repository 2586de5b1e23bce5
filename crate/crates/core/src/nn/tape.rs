//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only, records every operation
//! applied to [`Var`] handles, and replays them backwards to produce one
//! gradient per parameter. Shapes are checked when an op is recorded.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces all tensors, checking names and shapes match.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names do not match the model".into()));
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch: model {:?} vs checkpoint {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}

/// One gradient tensor per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Wraps explicit gradient tensors, which must match `store`'s shapes.
    pub fn from_tensors(store: &ParamStore, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != store.len() {
            return Err(Error::DimensionMismatch { expected: store.len(), got: tensors.len() });
        }
        for (p, g) in store.tensors().iter().zip(&tensors) {
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Broadcast(Var),
    SumCols(Var),
    Sum(Var),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// `None` for parameters, whose values live in the store.
    value: Option<Vec<f64>>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::invalid(format!("{what}: incompatible shapes {}x{} and {}x{}", a.0, a.1, b.0, b.1))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Option<Vec<f64>>) -> Var {
        self.nodes.push(Node { op, rows, cols, value });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        match (&n.value, &n.op) {
            (Some(data), _) => data,
            (None, Op::Param(id)) => self.params.get(*id).data(),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("consistent node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(Op::Input, t.rows(), t.cols(), Some(t.data().to_vec()))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, x: f64) -> Var {
        self.push(Op::Input, rows, cols, Some(vec![x; rows * cols]))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        self.push(Op::Param(id), t.rows(), t.cols(), None)
    }

    /// `x W^T + b` with `x: n x in`, `W: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = self.shape(x);
        let (out, win) = self.shape(w);
        if inp != win {
            return Err(shape_err("linear", (n, inp), (out, win)));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, out) {
                return Err(shape_err("linear bias", (1, out), self.shape(b)));
            }
        }
        let xs = self.value(x);
        let ws = self.value(w);
        let mut y = vec![0.0; n * out];
        for r in 0..n {
            let xr = &xs[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &ws[o * inp..(o + 1) * inp];
                y[r * out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bs = self.value(b);
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bs).for_each(|(y, b)| *y += b);
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, n, out, Some(y)))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(op, sa.0, sa.1, Some(y)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "min", Op::Min(a, b), f64::min)
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let y = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(op, r, c, Some(y))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map_op(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.map_op(a, Op::Offset(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map_op(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| Error::invalid("empty concat"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", (rows, 0), self.shape(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                y.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), rows, cols, Some(y)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| Error::invalid("empty concat"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows", (0, cols), self.shape(bad)));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut y = Vec::with_capacity(rows * cols);
        for &p in parts {
            y.extend_from_slice(self.value(p));
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), rows, cols, Some(y)))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::invalid(format!("column slice {start}..{end} out of range for width {c}")));
        }
        let w = end - start;
        let src = self.value(a);
        let mut y = Vec::with_capacity(r * w);
        for row in 0..r {
            y.extend_from_slice(&src[row * c + start..row * c + end]);
        }
        Ok(self.push(Op::SliceCols(a, start), r, w, Some(y)))
    }

    /// Repeats a `1 x 1`, `1 x c` or `r x 1` value to `rows x cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        let ok = (r == 1 || r == rows) && (c == 1 || c == cols);
        if !ok {
            return Err(shape_err("broadcast", (r, c), (rows, cols)));
        }
        let src = self.value(a);
        let mut y = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                y.push(src[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }]);
            }
        }
        Ok(self.push(Op::Broadcast(a), rows, cols, Some(y)))
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let y = self.value(a).chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        self.push(Op::SumCols(a), r, 1, Some(y))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().sum();
        self.push(Op::Sum(a), 1, 1, Some(vec![y]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Gradients of the `1 x 1` node `loss` w.r.t. every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = node.value.as_deref();
            let mut acc = |v: Var, delta: &dyn Fn(usize) -> f64| {
                let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                slot.iter_mut().enumerate().for_each(|(i, s)| *s += delta(i));
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.tensors[id.0].data_mut().iter_mut().zip(&g).for_each(|(o, d)| *o += d);
                }
                Op::Linear { x, w, b } => {
                    let (n, inp) = self.shape(*x);
                    let out_dim = node.cols;
                    let xs = self.value(*x);
                    let ws = self.value(*w);
                    let mut dx = vec![0.0; n * inp];
                    let mut dw = vec![0.0; out_dim * inp];
                    for r in 0..n {
                        for o in 0..out_dim {
                            let go = g[r * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &ws[o * inp..(o + 1) * inp];
                            let xr = &xs[r * inp..(r + 1) * inp];
                            dx[r * inp..(r + 1) * inp].iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                            dw[o * inp..(o + 1) * inp].iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                        }
                    }
                    acc(*x, &|i| dx[i]);
                    acc(*w, &|i| dw[i]);
                    if let Some(b) = b {
                        let mut db = vec![0.0; out_dim];
                        for row in g.chunks(out_dim) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        acc(*b, &|i| db[i]);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &|i| g[i]);
                    acc(*b, &|i| g[i]);
                }
                Op::Sub(a, b) => {
                    acc(*a, &|i| g[i]);
                    acc(*b, &|i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, &|i| g[i] * vb[i]);
                    acc(*b, &|i| g[i] * va[i]);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, &|i| if va[i] <= vb[i] { g[i] } else { 0.0 });
                    acc(*b, &|i| if va[i] <= vb[i] { 0.0 } else { g[i] });
                }
                Op::Scale(a, k) => acc(*a, &|i| g[i] * k),
                Op::Offset(a) => acc(*a, &|i| g[i]),
                Op::Relu(a) => {
                    let va = self.value(*a);
                    acc(*a, &|i| if va[i] > 0.0 { g[i] } else { 0.0 });
                }
                Op::Sigmoid(a) => {
                    let y = y.expect("value");
                    acc(*a, &|i| g[i] * y[i] * (1.0 - y[i]));
                }
                Op::Tanh(a) => {
                    let y = y.expect("value");
                    acc(*a, &|i| g[i] * (1.0 - y[i] * y[i]));
                }
                Op::Exp(a) => {
                    let y = y.expect("value");
                    acc(*a, &|i| g[i] * y[i]);
                }
                Op::Square(a) => {
                    let va = self.value(*a);
                    acc(*a, &|i| 2.0 * g[i] * va[i]);
                }
                Op::Clamp(a, lo, hi) => {
                    let va = self.value(*a);
                    acc(*a, &|i| if va[i] >= *lo && va[i] <= *hi { g[i] } else { 0.0 });
                }
                Op::ConcatCols(parts) => {
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        acc(p, &|i| g[(i / c) * total + offset + i % c]);
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        acc(p, &|i| g[offset + i]);
                        offset += r * c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (_, c) = self.shape(*a);
                    let w = node.cols;
                    let start = *start;
                    acc(*a, &|i| {
                        let (row, col) = (i / c, i % c);
                        if col >= start && col < start + w {
                            g[row * w + col - start]
                        } else {
                            0.0
                        }
                    });
                }
                Op::Broadcast(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = vec![0.0; r * c];
                    for i in 0..node.rows {
                        for j in 0..node.cols {
                            let src = (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j };
                            d[src] += g[i * node.cols + j];
                        }
                    }
                    acc(*a, &|i| d[i]);
                }
                Op::SumCols(a) => {
                    let c = self.shape(*a).1;
                    acc(*a, &|i| g[i / c]);
                }
                Op::Sum(a) => acc(*a, &|_| g[0]),
            }
        }
        if out.tensors.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
