//! Reverse-mode automatic differentiation over a tape of primitive ops.
//!
//! A [`Graph`] records every operation together with its forward value.
//! Parameters enter as named leaves via [`Graph::param`]; anything entered
//! through [`Graph::constant`] (or cut with [`Graph::detach`]) receives no
//! gradient. All values are 1-D or 2-D tensors treated as matrices.

use std::collections::BTreeMap;

use super::tensor::{self, matmul_nt, matmul_tn, Tensor};
use super::{ParamStore, RngStream};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    BroadcastRows(Var),
    RepeatRows(Var, usize),
    GroupMeanRows(Var, usize),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            MatMul(a, b) | AddRow(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatCols(a, b) => [Some(*a), Some(*b)],
            MulConst(x, _)
            | Scale(x, _)
            | Relu(x)
            | Sigmoid(x)
            | Square(x)
            | Reshape(x)
            | GatherRows(x, _)
            | GatherCols(x, _)
            | BroadcastRows(x)
            | RepeatRows(x, _)
            | GroupMeanRows(x, _)
            | Sum(x)
            | Mean(x) => [Some(*x), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
    /// Depends on at least one trainable leaf.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().flatten().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf bound to `store[name]`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        self.nodes[v.0].tracked = true;
        Ok(v)
    }

    /// Binds `store[name]` as a trainable leaf or as a constant.
    pub fn bind(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var> {
        if trainable {
            self.param(store, name)
        } else {
            Ok(self.constant(store.get(name)?.clone()))
        }
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_row(self.value(x), self.value(bias))?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).check_finite("add")?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y).check_finite("sub")?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).check_finite("mul")?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise product with a fixed tensor (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(dim_err("mul_const", tx, &c));
        }
        let value = tx.zip_map(&c, |a, b| a * b).check_finite("mul_const")?;
        Ok(self.push(value, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor).check_finite("scale")?;
        Ok(self.push(value, Op::Scale(x, factor)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = tensor::relu(self.value(x));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = tensor::sigmoid(self.value(x));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v).check_finite("square")?;
        Ok(self.push(value, Op::Square(x)))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).shape(), rate, rng)?;
        self.mul_const(x, mask)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `[n × p] ++ [n × q] -> [n × (p + q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, p) = ta.matrix_dims()?;
        let (n2, q) = tb.matrix_dims()?;
        if n != n2 {
            return Err(dim_err("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&ta.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&tb.data()[r * q..(r + 1) * q]);
        }
        let value = Tensor::from_parts(vec![n, p + q], out);
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.matrix_dims()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::usage(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::usage("gather_rows with no rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            out.extend_from_slice(&tx.data()[r * c..(r + 1) * c]);
        }
        let value = Tensor::from_parts(vec![rows.len(), c], out);
        Ok(self.push(value, Op::GatherRows(x, rows)))
    }

    /// Selects columns by index (repeats allowed).
    pub fn gather_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.matrix_dims()?;
        if let Some(&bad) = cols.iter().find(|&&k| k >= c) {
            return Err(Error::usage(format!(
                "gather_cols index {bad} out of range for {c} columns"
            )));
        }
        if cols.is_empty() {
            return Err(Error::usage("gather_cols with no columns"));
        }
        let mut out = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            let row = &tx.data()[r * c..(r + 1) * c];
            out.extend(cols.iter().map(|&k| row[k]));
        }
        let value = Tensor::from_parts(vec![n, cols.len()], out);
        Ok(self.push(value, Op::GatherCols(x, cols)))
    }

    /// Tiles a single row `[1 × c]` (or `[c]`) into `[n × c]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.matrix_dims()?;
        if r != 1 || n == 0 {
            return Err(Error::usage(format!(
                "broadcast_rows needs a single row, got {:?}",
                tx.shape()
            )));
        }
        let value = Tensor::from_parts(vec![n, c], tx.data().repeat(n));
        Ok(self.push(value, Op::BroadcastRows(x)))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.matrix_dims()?;
        if times == 0 {
            return Err(Error::usage("repeat_rows with zero repetitions"));
        }
        let mut out = Vec::with_capacity(n * times * c);
        for r in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&tx.data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::from_parts(vec![n * times, c], out);
        Ok(self.push(value, Op::RepeatRows(x, times)))
    }

    /// Averages consecutive groups of `group` rows: `[n·g × c] -> [n × c]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = tx.matrix_dims()?;
        if group == 0 || rows % group != 0 {
            return Err(Error::usage(format!("cannot average {rows} rows in groups of {group}")));
        }
        let n = rows / group;
        let mut out = vec![0.0; n * c];
        for r in 0..rows {
            let dst = &mut out[(r / group) * c..(r / group + 1) * c];
            for (o, v) in dst.iter_mut().zip(&tx.data()[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(value, Op::GroupMeanRows(x, group)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let value = Tensor::from_parts(vec![1], vec![s]).check_finite("sum")?;
        Ok(self.push(value, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let value = Tensor::from_parts(vec![1], vec![s]).check_finite("mean")?;
        Ok(self.push(value, Op::Mean(x)))
    }

    /// Mean squared difference between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse sweep from the scalar `loss`. Every parameter of `params`
    /// receives a gradient; parameters not reachable from `loss` get zeros.
    pub fn backward(&self, loss: Var, params: &ParamStore) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::new();
        for (name, value) in params.iter() {
            out.insert(name.to_string(), Tensor::zeros(value.shape()));
        }
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let (Some(name), Some(g)) = (&node.param, &grads[idx]) else {
                continue;
            };
            if let Some(slot) = out.get_mut(name) {
                slot.add_assign(g);
            }
        }
        for (name, g) in &out {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name} is not finite")));
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tracked = |v: &Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
            _ if !tracked(&v) => {}
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if tracked(a) {
                    acc(*a, matmul_nt(g, tb).reshape(ta.shape()).expect("shape"));
                }
                if tracked(b) {
                    acc(*b, matmul_tn(ta, g).reshape(tb.shape()).expect("shape"));
                }
            }
            Op::AddRow(x, b) => {
                let (n, m) = g.matrix_dims().expect("matrix");
                let mut gb = vec![0.0; m];
                for r in 0..n {
                    for (o, v) in gb.iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(tb, |gv, bv| gv * bv));
                acc(*b, g.zip_map(ta, |gv, av| gv * av));
            }
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |gv, cv| gv * cv)),
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, g.zip_map(tx, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(value, |gv, s| gv * s * (1.0 - s))),
            Op::Square(x) => {
                let tx = self.value(*x);
                acc(*x, g.zip_map(tx, |gv, xv| 2.0 * gv * xv));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = self.value(*a).matrix_dims().expect("matrix");
                let (_, q) = self.value(*b).matrix_dims().expect("matrix");
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for r in 0..n {
                    let row = &g.data()[r * (p + q)..(r + 1) * (p + q)];
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::from_parts(self.value(*a).shape().to_vec(), ga));
                acc(*b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
            }
            Op::GatherRows(x, rows) => {
                let tx = self.value(*x);
                let (_, c) = tx.matrix_dims().expect("matrix");
                let mut gx = vec![0.0; tx.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in gx[r * c..(r + 1) * c].iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::GatherCols(x, cols) => {
                let tx = self.value(*x);
                let (n, c) = tx.matrix_dims().expect("matrix");
                let w = cols.len();
                let mut gx = vec![0.0; tx.numel()];
                for r in 0..n {
                    for (&k, v) in cols.iter().zip(&g.data()[r * w..(r + 1) * w]) {
                        gx[r * c + k] += v;
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::BroadcastRows(x) => {
                let tx = self.value(*x);
                let (n, c) = g.matrix_dims().expect("matrix");
                let mut gx = vec![0.0; c];
                for r in 0..n {
                    for (o, v) in gx.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::RepeatRows(x, times) => {
                let tx = self.value(*x);
                let (n, c) = tx.matrix_dims().expect("matrix");
                let mut gx = vec![0.0; n * c];
                for r in 0..n * times {
                    let dst = r / times;
                    for (o, v) in gx[dst * c..(dst + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::GroupMeanRows(x, group) => {
                let tx = self.value(*x);
                let (rows, c) = tx.matrix_dims().expect("matrix");
                let inv = 1.0 / *group as f64;
                let mut gx = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    let src = r / group;
                    gx.extend(g.data()[src * c..(src + 1) * c].iter().map(|v| v * inv));
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::filled(&shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = g.data()[0] / tx.numel() as f64;
                acc(*x, Tensor::filled(tx.shape(), v));
            }
        }
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`, so the expected entry is one.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::param(format!("invalid mask shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}
