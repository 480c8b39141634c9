//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the inputs it was computed from. Node indices are therefore already in
//! topological order, and [`Graph::backward`] walks them once in reverse.

use super::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, layer_norm_forward, NormCache, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRowGroups(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    WeightedSum(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    softmax_probe: Option<Vec<Var>>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            softmax_probe: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records the output of every subsequent softmax so callers can inspect
    /// attention matrices after a forward pass.
    pub fn enable_softmax_probe(&mut self) {
        self.softmax_probe.get_or_insert_with(Vec::new);
    }

    pub fn probed_softmaxes(&self) -> Vec<&Tensor<T>> {
        self.softmax_probe
            .iter()
            .flatten()
            .map(|&v| self.value(v))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
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

    /// Adds a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(shape_err(op, ta, tb));
        }
        let vals = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), vals)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = tx.dims2();
        if tr.len() != n {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut vals = tx.values().to_vec();
        for i in 0..m {
            for (v, &b) in vals[i * n..(i + 1) * n].iter_mut().zip(tr.values()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), vals)?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let tx = self.value(x);
        let vals = tx.values().iter().map(|&v| v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), vals).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = super::softmax_rows(self.value(x));
        let ng = self.ng(x);
        let v = self.push(out, Op::Softmax(x), ng);
        if let Some(p) = self.softmax_probe.as_mut() {
            p.push(v);
        }
        v
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (out, cache) = layer_norm_forward(tx, tg.values(), tb.values(), eps);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let vals = tx.values().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), vals).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Stacks matrices with a common column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let n = self.value(*first).cols();
        let mut vals = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            vals.extend_from_slice(t.values());
        }
        let out = Tensor::new(vec![rows, n], vals)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Joins matrices with a common row count side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut vals = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                vals.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], vals)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if len == 0 || start + len > m {
            return Err(Error::Bounds {
                index: start + len,
                len: m,
            });
        }
        let out = Tensor::new(
            vec![len, n],
            tx.values()[start * n..(start + len) * n].to_vec(),
        )?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if len == 0 || start + len > n {
            return Err(Error::Bounds {
                index: start + len,
                len: n,
            });
        }
        let mut vals = Vec::with_capacity(m * len);
        for i in 0..m {
            vals.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], vals)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    /// Averages consecutive groups of `group` rows into one row each.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if group == 0 || m % group != 0 {
            return Err(Error::contract(format!(
                "cannot pool {m} rows in groups of {group}"
            )));
        }
        let inv = T::from_count(group).recip();
        let groups = m / group;
        let mut vals = vec![T::zero(); groups * n];
        for r in 0..m {
            let dst = &mut vals[(r / group) * n..(r / group + 1) * n];
            for (d, &s) in dst.iter_mut().zip(tx.row(r)) {
                *d += s * inv;
            }
        }
        let out = Tensor::new(vec![groups, n], vals)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanRowGroups(x, group), ng))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.dims2();
        if labels.len() != b {
            return Err(Error::contract(format!(
                "{} labels for {b} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = tl.values().to_vec();
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[y];
            super::softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        loss /= T::from_count(b);
        let out = Tensor::new(vec![1], vec![loss])?;
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().copied().sum();
        let out = Tensor::new(vec![1], vec![s]).expect("scalar");
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// `Σ x ⊙ w` for a constant weight buffer; a cheap way to turn any tensor
    /// into a scalar with non-degenerate gradients.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: tx.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = tx.values().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let out = Tensor::new(vec![1], vec![s])?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::WeightedSum(x, weights), ng))
    }

    /// Propagates d(root)/d(node) to every node that needs a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].needs_grad {
                let len = nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = ta.dims2();
                let n = tb.cols();
                acc(*a, &mut |da| gemm_nt(g, tb.values(), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(ta.values(), g, db, k, m, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = ta.dims2();
                let n = tb.rows();
                acc(*a, &mut |da| gemm_nn(g, tb.values(), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(g, ta.values(), db, n, m, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(tb.values()) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta.values()) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = nodes[row.0].value.len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d += g * *s;
                }
            }),
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.values().chunks(n))
                    {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let gam = nodes[gamma.0].value.values();
                let n = gam.len();
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(n).zip(cache.xhat.chunks(n)) {
                        for ((d, &gi), &hi) in d.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    let nf = T::from_count(n);
                    for (r, ((dr, gr), hr)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(cache.xhat.chunks(n))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        let rs = cache.rstd[r];
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            dr[j] += rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = &nodes[x.0].value;
                acc(*x, &mut |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(tx.values()) {
                        *d += gi * gelu_grad(xi);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |d| {
                        for (dr, gr) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dr, &gr[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                let n = node.value.cols();
                acc(*x, &mut |d| {
                    add_into(&mut d[start * n..start * n + g.len()], g)
                });
            }
            Op::SliceCols(x, start) => {
                let w = node.value.cols();
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(n).zip(g.chunks(w)) {
                        add_into(&mut dr[*start..*start + w], gr);
                    }
                });
            }
            Op::MeanRowGroups(x, group) => {
                let n = node.value.cols();
                let inv = T::from_count(*group).recip();
                acc(*x, &mut |d| {
                    for (r, dr) in d.chunks_mut(n).enumerate() {
                        let gr = &g[(r / group) * n..(r / group + 1) * n];
                        for (d, &gi) in dr.iter_mut().zip(gr) {
                            *d += gi * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].value.cols();
                let scale = g[0] / T::from_count(labels.len());
                acc(*logits, &mut |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum(x, w) => acc(*x, &mut |d| {
                for (d, &wi) in d.iter_mut().zip(w) {
                    *d += g[0] * wi;
                }
            }),
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
