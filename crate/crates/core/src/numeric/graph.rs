//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape once in reverse, so nodes are visited exactly once and shared
//! subexpressions accumulate gradient from every consumer.

use rand::Rng;

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var, usize),
    LayerNorm(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Pick(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Build with the op methods, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: Vec<bool>,
}

/// Gradients of leaf parameters produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
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

    /// Drops every node recorded after `mark` (a previous `len()`).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Sign pattern of every relu input seen so far. Two evaluations with
    /// different patterns lie on different sides of a hinge.
    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {:?}", op);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_rank2("matmul")?;
        let (k2, n) = tb.require_rank2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Elementwise sum. `b` may also be a `[1, n]` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            let t = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(t, Op::Add(a, b), ng));
        }
        let (m, n) = ta.require_rank2("add")?;
        if tb.shape() != [1, n] {
            return Err(mismatch("add", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (o, y) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o += y;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::AddRow(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("sub", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product. `b` may also be a `[1, n]` row broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x * y)
                .collect();
            let t = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(t, Op::Mul(a, b), ng));
        }
        let (m, n) = ta.require_rank2("mul")?;
        if tb.shape() != [1, n] {
            return Err(mismatch("mul", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (o, y) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o *= y;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MulRow(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, t, Op::Scale(x, c))
    }

    /// Adds a constant tensor of the same shape (attention masks, offsets).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != c.shape() {
            return Err(mismatch("add_const", t, c));
        }
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.unary(x, t, Op::Shift(x)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, t, Op::Shift(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require_rank2("transpose")?;
        let src = t.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.unary(x, t, Op::Transpose(x)))
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require_rank2("softmax")?;
        if axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "softmax axis",
                left: t.shape().to_vec(),
                right: vec![axis],
            });
        }
        let src = t.data();
        let mut data = vec![0.0; m * n];
        let (outer, inner, so, si) = if axis == 1 {
            (m, n, n, 1)
        } else {
            (n, m, 1, n)
        };
        for o in 0..outer {
            let idx = |i: usize| o * so + i * si;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..inner {
                mx = mx.max(src[idx(i)]);
            }
            let mut s = 0.0;
            for i in 0..inner {
                let e = (src[idx(i)] - mx).exp();
                data[idx(i)] = e;
                s += e;
            }
            for i in 0..inner {
                data[idx(i)] /= s;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.unary(x, t, Op::Softmax(x, axis)))
    }

    /// Row-wise log-softmax, stabilised by the row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require_rank2("log_softmax")?;
        let mut data = t.data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.unary(x, t, Op::LogSoftmax(x)))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.ln()).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, t, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, t, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let signs: Vec<bool> = t.data().iter().map(|&v| v > 0.0).collect();
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.kinks.extend(signs);
        self.unary(x, t, Op::Relu(x))
    }

    /// Sum of all elements, as a `[1, 1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean along `axis`; axis 0 yields `[1, n]`, axis 1 yields `[m, 1]`.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require_rank2("mean")?;
        let src = t.data();
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for r in 0..m {
                    for (a, v) in acc.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= m as f64);
                Tensor::new(vec![1, n], acc)?
            }
            1 => {
                let acc = (0..m)
                    .map(|r| src[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                Tensor::new(vec![m, 1], acc)?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "mean axis",
                    left: t.shape().to_vec(),
                    right: vec![axis],
                })
            }
        };
        Ok(self.unary(x, out, Op::Mean(x, axis)))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require_rank2("layer_norm")?;
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.unary(x, t, Op::LayerNorm(x, inv_std)))
    }

    /// Gathers rows of `table` (embedding lookup; also used for pooling selected rows).
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.require_rank2("embedding")?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::ShapeMismatch {
                    op: "embedding index",
                    left: t.shape().to_vec(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.unary(table, t, Op::Gather(table, indices.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]);
        let (m0, n0) = first.require_rank2("concat")?;
        let mut ng = false;
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (m, n) = t.require_rank2("concat")?;
                    if n != n0 {
                        return Err(mismatch("concat", first, t));
                    }
                    data.extend_from_slice(t.data());
                    rows += m;
                    ng |= self.ng(p);
                }
                Tensor::new(vec![rows, n0], data)?
            }
            1 => {
                let mut total = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (m, n) = t.require_rank2("concat")?;
                    if m != m0 {
                        return Err(mismatch("concat", first, t));
                    }
                    total += n;
                    ng |= self.ng(p);
                }
                let mut data = Vec::with_capacity(m0 * total);
                for r in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new(vec![m0, total], data)?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat axis",
                    left: first.shape().to_vec(),
                    right: vec![axis],
                })
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `x[start..end]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require_rank2("slice")?;
        let lim = if axis == 0 { m } else { n };
        if axis > 1 || start >= end || end > lim {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: t.shape().to_vec(),
                right: vec![axis, start, end],
            });
        }
        let out = if axis == 0 {
            Tensor::new(vec![end - start, n], t.data()[start * n..end * n].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for r in 0..m {
                data.extend_from_slice(&t.row_slice(r)[start..end]);
            }
            Tensor::new(vec![m, w], data)?
        };
        let op = if axis == 0 {
            Op::Slice(x, start, usize::MAX)
        } else {
            Op::Slice(x, start, end)
        };
        Ok(self.unary(x, out, op))
    }

    /// Picks `x[i, cols[i]]` for every row, giving `[m, 1]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.require_rank2("pick")?;
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: t.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let data = cols.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let t = Tensor::new(vec![m, 1], data)?;
        Ok(self.unary(x, t, Op::Pick(x, cols.to_vec())))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let t = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, t, Op::Dropout(x, mask))
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph; returns the
    /// gradients of every leaf created with [`Graph::param`].
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph { nodes, .. } = self;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward (loss must be scalar)",
                left: nodes[loss.0].value.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let ng = |v: Var| nodes[v.0].needs_grad;

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    if ng(*a) {
                        let acc = slot(&mut grads, *a, m * k);
                        matmul_nt_acc(&g, tb.data(), acc, m, n, k);
                    }
                    if ng(*b) {
                        let acc = slot(&mut grads, *b, k * n);
                        matmul_tn_acc(ta.data(), &g, acc, m, k, n);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if ng(v) {
                            add_into(slot(&mut grads, v, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if ng(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if ng(*b) {
                        let n = y.cols();
                        let acc = slot(&mut grads, *b, n);
                        for r in 0..y.rows() {
                            add_into(acc, &g[r * n..(r + 1) * n]);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if ng(*b) {
                        let acc = slot(&mut grads, *b, g.len());
                        for (o, gv) in acc.iter_mut().zip(&g) {
                            *o -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if ng(*a) {
                        let acc = slot(&mut grads, *a, g.len());
                        for ((o, gv), bv) in acc.iter_mut().zip(&g).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    }
                    if ng(*b) {
                        let acc = slot(&mut grads, *b, g.len());
                        for ((o, gv), av) in acc.iter_mut().zip(&g).zip(ta.data()) {
                            *o += gv * av;
                        }
                    }
                }
                Op::MulRow(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let n = tb.len();
                    if ng(*a) {
                        let acc = slot(&mut grads, *a, g.len());
                        for (i, (o, gv)) in acc.iter_mut().zip(&g).enumerate() {
                            *o += gv * tb.data()[i % n];
                        }
                    }
                    if ng(*b) {
                        let acc = slot(&mut grads, *b, n);
                        for (i, (gv, av)) in g.iter().zip(ta.data()).enumerate() {
                            acc[i % n] += gv * av;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let acc = slot(&mut grads, *x, g.len());
                    for (o, gv) in acc.iter_mut().zip(&g) {
                        *o += gv * c;
                    }
                }
                Op::Shift(x) => add_into(slot(&mut grads, *x, g.len()), &g),
                Op::Transpose(x) => {
                    // y is [n, m]; x is [m, n]
                    let (n, m) = (y.rows(), y.cols());
                    let acc = slot(&mut grads, *x, g.len());
                    for i in 0..m {
                        for j in 0..n {
                            acc[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Softmax(x, axis) => {
                    let (m, n) = (y.rows(), y.cols());
                    let yd = y.data();
                    let (outer, inner, so, si) = if *axis == 1 {
                        (m, n, n, 1)
                    } else {
                        (n, m, 1, n)
                    };
                    let acc = slot(&mut grads, *x, g.len());
                    for o in 0..outer {
                        let idx = |i: usize| o * so + i * si;
                        let dot: f64 = (0..inner).map(|i| g[idx(i)] * yd[idx(i)]).sum();
                        for i in 0..inner {
                            acc[idx(i)] += yd[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let (m, n) = (y.rows(), y.cols());
                    let yd = y.data();
                    let acc = slot(&mut grads, *x, g.len());
                    for r in 0..m {
                        let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            let i = r * n + c;
                            acc[i] += g[i] - yd[i].exp() * gs;
                        }
                    }
                }
                Op::Log(x) => {
                    let xd = val(*x).data();
                    let acc = slot(&mut grads, *x, g.len());
                    for ((o, gv), xv) in acc.iter_mut().zip(&g).zip(xd) {
                        *o += gv / xv;
                    }
                }
                Op::Exp(x) => {
                    let acc = slot(&mut grads, *x, g.len());
                    for ((o, gv), yv) in acc.iter_mut().zip(&g).zip(y.data()) {
                        *o += gv * yv;
                    }
                }
                Op::Relu(x) => {
                    let xd = val(*x).data();
                    let acc = slot(&mut grads, *x, g.len());
                    for ((o, gv), xv) in acc.iter_mut().zip(&g).zip(xd) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = val(*x).len();
                    let acc = slot(&mut grads, *x, n);
                    acc.iter_mut().for_each(|o| *o += g[0]);
                }
                Op::Mean(x, axis) => {
                    let tx = val(*x);
                    let (m, n) = (tx.rows(), tx.cols());
                    let acc = slot(&mut grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            acc[r * n + c] += if *axis == 0 {
                                g[c] / m as f64
                            } else {
                                g[r] / n as f64
                            };
                        }
                    }
                }
                Op::LayerNorm(x, inv_std) => {
                    let (m, n) = (y.rows(), y.cols());
                    let yd = y.data();
                    let acc = slot(&mut grads, *x, g.len());
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &yd[r * n..(r + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            acc[r * n + c] += inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                }
                Op::Gather(table, idx) => {
                    let tt = val(*table);
                    let d = tt.cols();
                    let acc = slot(&mut grads, *table, tt.len());
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut acc[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
                Op::Concat(parts, axis) => {
                    let total_cols = y.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let tp = val(p);
                        let (m, n) = (tp.rows(), tp.cols());
                        if ng(p) {
                            let acc = slot(&mut grads, p, m * n);
                            if *axis == 0 {
                                add_into(acc, &g[offset * n..(offset + m) * n]);
                            } else {
                                for r in 0..m {
                                    let src =
                                        &g[r * total_cols + offset..r * total_cols + offset + n];
                                    add_into(&mut acc[r * n..(r + 1) * n], src);
                                }
                            }
                        }
                        offset += if *axis == 0 { m } else { n };
                    }
                }
                Op::Slice(x, start, end) => {
                    let tx = val(*x);
                    let n = tx.cols();
                    let acc = slot(&mut grads, *x, tx.len());
                    if *end == usize::MAX {
                        add_into(&mut acc[start * n..start * n + g.len()], &g);
                    } else {
                        let w = end - start;
                        for r in 0..tx.rows() {
                            add_into(&mut acc[r * n + start..r * n + end], &g[r * w..(r + 1) * w]);
                        }
                    }
                }
                Op::Pick(x, cols) => {
                    let n = val(*x).cols();
                    let acc = slot(&mut grads, *x, val(*x).len());
                    for (r, &c) in cols.iter().enumerate() {
                        acc[r * n + c] += g[r];
                    }
                }
                Op::Dropout(x, mask) => {
                    let acc = slot(&mut grads, *x, g.len());
                    for ((o, gv), k) in acc.iter_mut().zip(&g).zip(mask) {
                        *o += gv * k;
                    }
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (o, v) in acc.iter_mut().zip(g) {
        *o += v;
    }
}
