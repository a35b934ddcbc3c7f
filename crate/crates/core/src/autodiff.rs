//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order, so the record is
//! already topologically sorted; [`Tape::backward`] walks it once in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp { x: Var, lo: Real, hi: Real },
    Sum(Var),
    SumRows(Var),
    AddN(Vec<Var>),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    SplitHeads { x: Var, batch: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, heads: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(Real, Real)> },
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize>, smoothing: Real, probs: Vec<Real>, count: usize },
    Dropout { x: Var, mask: Vec<Real> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: Real = 1e-6;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(Real) -> Real) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data);
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Real, Real) -> Real) -> Var {
        self.same_shape(a, b, "elementwise");
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: Real) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), Real::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), Real::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping bites.
    pub fn clamp(&mut self, x: Var, lo: Real, hi: Real) -> Var {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as Real;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[n, m] -> [n]`
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.as_matrix();
        let data = t.data().chunks(cols).map(|r| r.iter().sum()).collect();
        self.push(Tensor::new(vec![rows], data), Op::SumRows(x), &[x])
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            self.same_shape(xs[0], x, "add_n");
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(x).data()) {
                *a += b;
            }
        }
        self.push(acc, Op::AddN(xs.to_vec()), xs)
    }

    /// `a[n,k] · b[k,m]`, or `a[n,k] · b[m,k]ᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(tb.shape().len(), 2, "matmul rhs must be 2-d");
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let m = if trans_b { tb.shape()[0] } else { tb.shape()[1] };
        let kb = if trans_b { tb.shape()[1] } else { tb.shape()[0] };
        assert_eq!(k, kb, "matmul inner dimensions");
        let mut out = vec![0.0; n * m];
        if trans_b {
            tensor::matmul_nt(ta.data(), tb.data(), n, k, m, &mut out);
        } else {
            tensor::matmul(ta.data(), tb.data(), n, k, m, &mut out);
        }
        self.push(Tensor::new(vec![n, m], out), Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched matmul over a leading group dimension.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 3, "batch_matmul lhs must be 3-d");
        assert_eq!(tb.shape().len(), 3, "batch_matmul rhs must be 3-d");
        let (g, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        assert_eq!(g, tb.shape()[0], "batch_matmul group count");
        let (kb, m) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        assert_eq!(k, kb, "batch_matmul inner dimensions");
        let mut out = vec![0.0; g * n * m];
        for gi in 0..g {
            let ad = &ta.data()[gi * n * k..(gi + 1) * n * k];
            let bd = &tb.data()[gi * k * m..(gi + 1) * k * m];
            let od = &mut out[gi * n * m..(gi + 1) * n * m];
            if trans_b {
                tensor::matmul_nt(ad, bd, n, k, m, od);
            } else {
                tensor::matmul(ad, bd, n, k, m, od);
            }
        }
        self.push(Tensor::new(vec![g, n, m], out), Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// Adds a `[m]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.as_matrix();
        assert_eq!(tb.len(), cols, "bias width");
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w, false);
        self.add_bias(y, b)
    }

    /// `[batch*t, heads*dh] -> [batch*heads, t, dh]`
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Var {
        let t = self.value(x);
        let (rows, d) = t.as_matrix();
        assert!(rows % batch == 0 && d % heads == 0, "split_heads extents");
        let (len, dh) = (rows / batch, d / heads);
        let mut out = vec![0.0; rows * d];
        let src = t.data();
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..len {
                    let from = (b * len + s) * d + h * dh;
                    let to = ((b * heads + h) * len + s) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, len, dh], out);
        self.push(value, Op::SplitHeads { x, batch, heads }, &[x])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 3);
        let (len, dh) = (t.shape()[1], t.shape()[2]);
        let d = heads * dh;
        let mut out = vec![0.0; batch * len * d];
        let src = t.data();
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..len {
                    let from = ((b * heads + h) * len + s) * dh;
                    let to = (b * len + s) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * len, d], out);
        self.push(value, Op::MergeHeads { x, batch, heads }, &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = t.as_matrix();
        let mut out = t.clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRow { row: r });
            }
            tensor::softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, cols) = tx.as_matrix();
        assert_eq!(tg.len(), cols);
        assert_eq!(tb.len(), cols);
        let mut out = vec![0.0; tx.len()];
        let stats = tensor::layer_norm_rows(tx.data(), cols, tg.data(), tb.data(), LAYER_NORM_EPS, &mut out);
        let value = Tensor::new(tx.shape().to_vec(), out);
        self.push(value, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.as_matrix();
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let (n, d) = t.as_matrix();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "select_rows index {r} out of {n}");
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out);
        self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Mean label-smoothed negative log-likelihood over rows whose target is
    /// not `ignore`. Smoothing spreads `smoothing / vocab` over every class.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
        smoothing: Real,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, vocab) = t.as_matrix();
        assert_eq!(rows, targets.len(), "one target per logits row");
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if Some(target) == ignore {
                continue;
            }
            if target >= vocab {
                return Err(Error::TargetOutOfRange { index: target, vocab });
            }
            let row = t.row(r);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRow { row: r });
            }
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<Real>().ln() + max;
            let mut nll = 0.0;
            for (k, &z) in row.iter().enumerate() {
                let logp = z - lse;
                probs[r * vocab + k] = logp.exp();
                let q = smoothed_target(k, target, vocab, smoothing);
                if q != 0.0 {
                    nll -= q * logp;
                }
            }
            total += nll;
            count += 1;
        }
        if count == 0 {
            return Err(Error::AllPadded);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore,
            smoothing,
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(total / count as Real), op, &[logits]))
    }

    /// Inverted dropout; `p == 0` records nothing.
    pub fn dropout(&mut self, x: Var, p: Real, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let t = self.value(x);
        let mask: Vec<Real> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep as f64 { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| axpy(d, g, *c)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::Exp(x) => {
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / vx[i];
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::SumRows(x) => {
                let (_, cols) = self.value(*x).as_matrix();
                self.acc(grads, *x, |d| {
                    for (r, row) in d.chunks_mut(cols).enumerate() {
                        row.iter_mut().for_each(|v| *v += g[r]);
                    }
                });
            }
            Op::AddN(xs) => {
                for &x in xs {
                    self.acc(grads, x, |d| axpy(d, g, 1.0));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = out.shape()[1];
                if *trans_b {
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    self.acc(grads, *a, |d| {
                        let mut tmp = vec![0.0; n * k];
                        tensor::matmul(g, tb.data(), n, m, k, &mut tmp);
                        axpy(d, &tmp, 1.0);
                    });
                    self.acc(grads, *b, |d| tensor::matmul_tn_acc(g, ta.data(), n, m, k, d));
                } else {
                    // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                    self.acc(grads, *a, |d| {
                        let mut tmp = vec![0.0; n * k];
                        tensor::matmul_nt(g, tb.data(), n, m, k, &mut tmp);
                        axpy(d, &tmp, 1.0);
                    });
                    self.acc(grads, *b, |d| tensor::matmul_tn_acc(ta.data(), g, n, k, m, d));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (groups, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let m = out.shape()[2];
                self.acc(grads, *a, |d| {
                    let mut tmp = vec![0.0; n * k];
                    for gi in 0..groups {
                        let gg = &g[gi * n * m..(gi + 1) * n * m];
                        let bd = &tb.data()[gi * k * m..(gi + 1) * k * m];
                        if *trans_b {
                            tensor::matmul(gg, bd, n, m, k, &mut tmp);
                        } else {
                            tensor::matmul_nt(gg, bd, n, m, k, &mut tmp);
                        }
                        axpy(&mut d[gi * n * k..(gi + 1) * n * k], &tmp, 1.0);
                    }
                });
                self.acc(grads, *b, |d| {
                    for gi in 0..groups {
                        let gg = &g[gi * n * m..(gi + 1) * n * m];
                        let ad = &ta.data()[gi * n * k..(gi + 1) * n * k];
                        let db = &mut d[gi * k * m..(gi + 1) * k * m];
                        if *trans_b {
                            tensor::matmul_tn_acc(gg, ad, n, m, k, db);
                        } else {
                            tensor::matmul_tn_acc(ad, gg, n, k, m, db);
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                let cols = self.value(*bias).len();
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(cols) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::SplitHeads { x, batch, heads } => {
                let (rows, dm) = self.value(*x).as_matrix();
                let (len, dh) = (rows / batch, dm / heads);
                self.acc(grads, *x, |d| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for s in 0..len {
                                let to = (b * len + s) * dm + h * dh;
                                let from = ((b * heads + h) * len + s) * dh;
                                axpy(&mut d[to..to + dh], &g[from..from + dh], 1.0);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, heads } => {
                let tx = self.value(*x);
                let (len, dh) = (tx.shape()[1], tx.shape()[2]);
                let dm = heads * dh;
                self.acc(grads, *x, |d| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for s in 0..len {
                                let to = ((b * heads + h) * len + s) * dh;
                                let from = (b * len + s) * dm + h * dh;
                                axpy(&mut d[to..to + dh], &g[from..from + dh], 1.0);
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, cols) = out.as_matrix();
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let s = tensor::dot(gr, yr);
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let tx = self.value(*x);
                let (_, cols) = tx.as_matrix();
                let gam = self.value(*gamma).data();
                let n = cols as Real;
                self.acc(grads, *x, |d| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &tx.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for c in 0..cols {
                            let dy = gr[c] * gam[c];
                            let xhat = (xr[c] - mean) * rstd;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        let dr = &mut d[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let dy = gr[c] * gam[c];
                            let xhat = (xr[c] - mean) * rstd;
                            dr[c] += rstd / n * (n * dy - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * (tx.data()[r * cols + c] - mean) * rstd;
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for row in g.chunks(cols) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (_, cols) = self.value(*table).as_matrix();
                self.acc(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut d[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let (_, cols) = self.value(*x).as_matrix();
                self.acc(grads, *x, |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut d[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols], 1.0);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, ignore, smoothing, probs, count } => {
                let (_, vocab) = self.value(*logits).as_matrix();
                let scale = g[0] / *count as Real;
                self.acc(grads, *logits, |d| {
                    for (r, &target) in targets.iter().enumerate() {
                        if Some(target) == *ignore {
                            continue;
                        }
                        for k in 0..vocab {
                            let q = smoothed_target(k, target, vocab, *smoothing);
                            d[r * vocab + k] += scale * (probs[r * vocab + k] - q);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<Real>>], v: Var, f: impl FnOnce(&mut [Real])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn axpy(dst: &mut [Real], src: &[Real], a: Real) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn smoothed_target(k: usize, target: usize, vocab: usize, smoothing: Real) -> Real {
    let base = smoothing / vocab as Real;
    if k == target {
        1.0 - smoothing + base
    } else {
        base
    }
}

pub fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
