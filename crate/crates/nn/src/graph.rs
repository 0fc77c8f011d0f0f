//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in
//! evaluation order. Values are computed eagerly; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients into every node that
//! (transitively) depends on a leaf created with `requires_grad = true`.
//! Nodes that do not depend on a trainable leaf never allocate a gradient.

use crate::error::{shape_err, NnError, Result};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, w: Var, k: usize, n: usize },
    Bmm { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale(Var, T),
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Softmax { a: Var, width: usize },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Normalize { a: Var, outer: usize, n: usize, inner: usize, inv_std: Vec<T> },
    TokenCe { logits: Var, classes: usize, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    MulConst { a: Var, w: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. One graph is built per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding a constant (never differentiated).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ---------------------------------------------------------------- ops

    /// `a[.., k] @ w[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ashape, wshape) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if wshape.len() != 2 || ashape.last() != Some(&wshape[0]) {
            return shape_err("matmul", format!("{ashape:?} x {wshape:?}"));
        }
        let (k, n) = (wshape[0], wshape[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let mut shape = ashape;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, w, k, n }, rg))
    }

    /// Batched matmul: `a[g, m, k] @ b[g, k, n]`, or `b[g, n, k]` transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] {
            return shape_err("bmm", format!("{ashape:?} x {bshape:?}"));
        }
        let (g, m, k) = (ashape[0], ashape[1], ashape[2]);
        let (bk, n) = if trans_b {
            (bshape[2], bshape[1])
        } else {
            (bshape[1], bshape[2])
        };
        if bk != k {
            return shape_err("bmm", format!("{ashape:?} x {bshape:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let bstr = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for gi in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[gi * m * k..(gi + 1) * m * k],
                (k as isize, 1),
                &bv[gi * k * n..(gi + 1) * k * n],
                bstr,
                T::zero(),
                &mut out[gi * m * n..(gi + 1) * m * n],
                (n as isize, 1),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[g, m, n], out)?,
            Op::Bmm { a, b, g, m, k, n, trans_b },
            rg,
        ))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (ashape, rshape) = (self.shape(a), self.shape(row));
        if rshape.is_empty()
            || rshape.len() > ashape.len()
            || ashape[ashape.len() - rshape.len()..] != *rshape
        {
            return shape_err(op, format!("{ashape:?} with row {rshape:?}"));
        }
        Ok(())
    }

    /// Adds `row` broadcast over the leading axes of `a`; `row`'s shape must
    /// equal the trailing shape of `a` (bias vectors, positional tables).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % r.len()])
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow { a, row }, rg))
    }

    /// Multiplies `a` by `row` broadcast over the leading axes.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % r.len()])
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow { a, row }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err("permute", format!("{shape:?} by {perm:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let width = *va.shape().last().ok_or_else(|| NnError::Shape {
            op: "softmax",
            detail: "scalar input".into(),
        })?;
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(width) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { a, width }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, cc) = (c::<T>(GELU_K), c::<T>(GELU_C));
        let half = c::<T>(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (k * (x + cc * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// Standardizes `a` (viewed as `[outer, n, inner]`) over the middle axis
    /// with biased variance: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, a: Var, outer: usize, n: usize, inner: usize, eps: T) -> Result<Var> {
        let va = self.value(a);
        if outer * n * inner != va.len() || n == 0 {
            return shape_err(
                "normalize",
                format!("{:?} as [{outer}, {n}, {inner}]", va.shape()),
            );
        }
        let x = va.data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let nf = c::<T>(n as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| x[at(j)]).fold(T::zero(), |s, v| s + v) / nf;
                let var = (0..n)
                    .map(|j| (x[at(j)] - mean) * (x[at(j)] - mean))
                    .fold(T::zero(), |s, v| s + v)
                    / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..n {
                    out[at(j)] = (x[at(j)] - mean) * is;
                }
            }
        }
        let value = Tensor::new(va.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Normalize {
                a,
                outer,
                n,
                inner,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-row cross-entropy `-log softmax(logits)[label]` over the last axis.
    /// Output drops the class axis.
    pub fn token_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let shape = vl.shape().to_vec();
        let classes = *shape.last().unwrap_or(&0);
        if classes == 0 || vl.len() / classes != labels.len() {
            return shape_err(
                "token_cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            );
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![T::zero(); vl.len()];
        let mut loss = Vec::with_capacity(labels.len());
        for (r, (row, &lab)) in vl.data().chunks(classes).zip(labels).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().fold(T::zero(), |s, &v| s + (v - mx).exp());
            let lse = mx + sum.ln();
            loss.push(lse - row[lab]);
            for (j, &v) in row.iter().enumerate() {
                probs[r * classes + j] = (v - lse).exp();
            }
        }
        let out_shape = &shape[..shape.len() - 1];
        let value = Tensor::new(out_shape, loss)?;
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::TokenCe {
                logits,
                classes,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().fold(T::zero(), |acc, &v| acc + v) / c::<T>(va.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Elementwise product with constant weights; no gradient reaches `w`.
    pub fn mul_const(&mut self, a: Var, w: &[T]) -> Result<Var> {
        let va = self.value(a);
        if va.len() != w.len() {
            return shape_err("mul_const", format!("{:?} with {} weights", va.shape(), w.len()));
        }
        let data = va.data().iter().zip(w).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst { a, w: w.to_vec() }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar output. Clears gradients of any previous pass.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return shape_err("backward", format!("non-scalar output {:?}", self.shape(out)));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.rg(out) {
            return Ok(());
        }
        self.grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &gout);
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn acc_add(&mut self, v: Var, src: &[T]) {
        self.acc(v, |g| {
            for (a, &b) in g.iter_mut().zip(src) {
                *a = *a + b;
            }
        });
    }

    fn backprop_node(&mut self, idx: usize, gout: &[T]) {
        // Take the op out temporarily so parents can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, w, k, n } => {
                let (a, w, k, n) = (*a, *w, *k, *n);
                let m = gout.len() / n.max(1);
                if self.rg(a) {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    self.acc(a, |ga| {
                        T::gemm(m, n, k, T::one(), gout, (n as isize, 1), &wv, (1, n as isize), T::one(), ga, (k as isize, 1));
                    });
                }
                if self.rg(w) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.acc(w, |gw| {
                        T::gemm(k, m, n, T::one(), &av, (1, k as isize), gout, (n as isize, 1), T::one(), gw, (n as isize, 1));
                    });
                }
            }
            Op::Bmm { a, b, g, m, k, n, trans_b } => {
                let (a, b, g, m, k, n, tb) = (*a, *b, *g, *m, *k, *n, *trans_b);
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    // b^T as a logical [n, k] matrix.
                    let bt = if tb { (k as isize, 1) } else { (1, n as isize) };
                    self.acc(a, |ga| {
                        for gi in 0..g {
                            T::gemm(m, n, k, T::one(), &gout[gi * m * n..(gi + 1) * m * n], (n as isize, 1), &bv[gi * k * n..(gi + 1) * k * n], bt, T::one(), &mut ga[gi * m * k..(gi + 1) * m * k], (k as isize, 1));
                        }
                    });
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.acc(b, |gb| {
                        for gi in 0..g {
                            let ga_ = &av[gi * m * k..(gi + 1) * m * k];
                            let go = &gout[gi * m * n..(gi + 1) * m * n];
                            let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                            if tb {
                                // db[n, k] += dout^T[n, m] @ a[m, k]
                                T::gemm(n, m, k, T::one(), go, (1, n as isize), ga_, (k as isize, 1), T::one(), dst, (k as isize, 1));
                            } else {
                                // db[k, n] += a^T[k, m] @ dout[m, n]
                                T::gemm(k, m, n, T::one(), ga_, (1, k as isize), go, (n as isize, 1), T::one(), dst, (n as isize, 1));
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_add(a, gout);
                self.acc_add(b, gout);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_add(a, gout);
                self.acc(b, |g| {
                    for (x, &y) in g.iter_mut().zip(gout) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * bv[i];
                    }
                });
                self.acc(b, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * av[i];
                    }
                });
            }
            Op::AddRow { a, row } => {
                let (a, row) = (*a, *row);
                self.acc_add(a, gout);
                self.acc(row, |g| {
                    let r = g.len();
                    for (i, &v) in gout.iter().enumerate() {
                        g[i % r] = g[i % r] + v;
                    }
                });
            }
            Op::MulRow { a, row } => {
                let (a, row) = (*a, *row);
                let rv = self.nodes[row.0].value.data().to_vec();
                let r = rv.len();
                if self.rg(a) {
                    self.acc(a, |g| {
                        for (i, &v) in gout.iter().enumerate() {
                            g[i] = g[i] + v * rv[i % r];
                        }
                    });
                }
                if self.rg(row) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.acc(row, |g| {
                        for (i, &v) in gout.iter().enumerate() {
                            g[i % r] = g[i % r] + v * av[i];
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                self.acc(a, |g| {
                    for (x, &y) in g.iter_mut().zip(gout) {
                        *x = *x + y * s;
                    }
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                self.acc_add(a, gout);
            }
            Op::Permute { a, perm } => {
                let a = *a;
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let back = permute_data(gout, &out_shape, &inv);
                self.acc_add(a, &back);
            }
            Op::Softmax { a, width } => {
                let (a, width) = (*a, *width);
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(a, |g| {
                    for (r, (yr, gr)) in y.chunks(width).zip(gout.chunks(width)).enumerate() {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for j in 0..width {
                            let i = r * width + j;
                            g[i] = g[i] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                let x = self.nodes[a.0].value.data().to_vec();
                let (k, cc, half) = (c::<T>(GELU_K), c::<T>(GELU_C), c::<T>(0.5));
                let three = c::<T>(3.0);
                self.acc(a, |g| {
                    for i in 0..g.len() {
                        let v = x[i];
                        let t = (k * (v + cc * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * k * (T::one() + three * cc * v * v);
                        g[i] = g[i] + gout[i] * d;
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let x = self.nodes[a.0].value.data().to_vec();
                self.acc(a, |g| {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            g[i] = g[i] + gout[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(a, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * y[i];
                    }
                });
            }
            Op::Normalize { a, outer, n, inner, inv_std } => {
                let (a, outer, n, inner) = (*a, *outer, *n, *inner);
                let xhat = self.nodes[idx].value.data().to_vec();
                let nf = c::<T>(n as f64);
                self.acc(a, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let mut sum_g = T::zero();
                            let mut sum_gx = T::zero();
                            for j in 0..n {
                                sum_g = sum_g + gout[at(j)];
                                sum_gx = sum_gx + gout[at(j)] * xhat[at(j)];
                            }
                            let is = inv_std[o * inner + i];
                            for j in 0..n {
                                let p = at(j);
                                g[p] = g[p] + is / nf * (nf * gout[p] - sum_g - xhat[p] * sum_gx);
                            }
                        }
                    }
                });
            }
            Op::TokenCe { logits, classes, labels, probs } => {
                let (logits, classes) = (*logits, *classes);
                self.acc(logits, |g| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let i = r * classes + j;
                            let onehot = if j == lab { T::one() } else { T::zero() };
                            g[i] = g[i] + gout[r] * (probs[i] - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let s = gout[0];
                self.acc(a, |g| g.iter_mut().for_each(|x| *x = *x + s));
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.len();
                let s = gout[0] / c::<T>(n as f64);
                self.acc(a, |g| g.iter_mut().for_each(|x| *x = *x + s));
            }
            Op::MulConst { a, w } => {
                let a = *a;
                self.acc(a, |g| {
                    for i in 0..g.len() {
                        g[i] = g[i] + gout[i] * w[i];
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return src.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}
