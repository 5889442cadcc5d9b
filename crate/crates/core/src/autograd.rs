//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept on
//! the tape until it is dropped; [`Tape::backward`] walks the recorded nodes
//! in reverse and returns a [`Gradients`] table. Parameters are borrowed from
//! a [`ParamStore`] rather than copied.

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Matrix<T>),
    Borrowed(&'p Matrix<T>),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    ScaleRows { a: Var, s: Var },
    Scale { a: Var, k: T },
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, rstd: Vec<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape(Var),
    RowNormalize { a: Var, norms: Vec<T> },
    Sum(Var),
    Mean(Var),
    L1 { pred: Var, target: Matrix<T> },
    Mse { pred: Var, target: Matrix<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix<T> },
    Dice { logits: Var, targets: Vec<usize>, probs: Matrix<T> },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Row-wise softmax, optionally restricted to permitted entries.
///
/// Masked-out entries are exactly zero in the output. Returns the index of the
/// first row with no permitted entry as the error.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>, mask: Option<&[bool]>) -> Result<Matrix<T>, usize> {
    if let Some(m) = mask {
        assert_eq!(m.len(), x.len(), "softmax mask shape mismatch");
    }
    let cols = x.cols();
    let mut out = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let row = x.row(r);
        let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                any = true;
                max = max.max(v);
            }
        }
        if !any {
            return Err(r);
        }
        let orow = out.row_mut(r);
        let mut total = T::zero();
        for c in 0..cols {
            if allowed(c) {
                let e = (row[c] - max).exp();
                orow[c] = e;
                total += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let t = (T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DICE_SMOOTH: f64 = 1.0;

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    store: Option<&'p ParamStore<T>>,
    frozen: Option<&'p [bool]>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, frozen: None, bound: Vec::new() }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self { nodes: Vec::new(), store: Some(store), frozen: None, bound: vec![None; store.len()] }
    }

    /// Parameters flagged in `frozen` enter the tape as constants.
    pub fn with_frozen(store: &'p ParamStore<T>, frozen: &'p [bool]) -> Self {
        assert_eq!(frozen.len(), store.len());
        Self { nodes: Vec::new(), store: Some(store), frozen: Some(frozen), bound: vec![None; store.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.needs(v))
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let needs_grad = !self.frozen.is_some_and(|f| f[id.0]);
        self.nodes.push(Node { value: Value::Borrowed(store.get(id)), op: Op::Leaf, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self.value(a).matmul_t(ta, self.value(b), tb);
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.any_needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let ng = self.any_needs(&[a, row]);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    /// Multiplies row `i` of `a` by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(s), (r, 1), "scale_rows expects an {r}x1 column");
        let mut out = self.value(a).clone();
        for i in 0..r {
            let k = self.value(s).get(i, 0);
            for o in out.row_mut(i) {
                *o *= k;
            }
        }
        let ng = self.any_needs(&[a, s]);
        self.push(out, Op::ScaleRows { a, s }, ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).scale(k);
        let ng = self.needs(a);
        self.push(out, Op::Scale { a, k }, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row softmax; with a mask, entries where `mask` is false get weight
    /// zero. Panics on a fully masked row; callers validate masks first.
    pub fn softmax(&mut self, a: Var, mask: Option<&Arc<Vec<bool>>>) -> Var {
        let out = softmax_rows(self.value(a), mask.map(|m| m.as_slice()))
            .unwrap_or_else(|r| panic!("softmax row {r} has no permitted entry"));
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (r, c) = xm.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!((g.len(), b.len()), (c, c), "layer norm affine shape mismatch");
        let n = T::from_usize(c).unwrap();
        let mut xhat = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xm.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
            rstd.push(s);
            let xh = xhat.row_mut(i);
            for j in 0..c {
                xh[j] = (row[j] - mean) * s;
            }
            let orow = out.row_mut(i);
            for j in 0..c {
                orow[j] = xhat.get(i, j) * g[j] + b[j];
            }
        }
        let ng = self.any_needs(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), c, "concat_rows column mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let ng = self.any_needs(parts);
        self.push(Matrix::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(r, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                out.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        let ng = self.any_needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows(), "row slice out of range");
        let c = m.cols();
        let out = Matrix::from_vec(len, c, m.data()[start * c..(start + len) * c].to_vec());
        let ng = self.needs(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "column slice out of range");
        let out = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        let ng = self.needs(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    /// `out[i] = a[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let c = m.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let ng = self.needs(a);
        self.push(Matrix::from_vec(idx.len(), c, data), Op::GatherRows { a, idx: idx.to_vec() }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Scales each row to unit Euclidean norm. Rows must be non-zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = m.row(i).iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(n);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RowNormalize { a, norms }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.sum() / T::from_usize(m.len()).unwrap();
        let ng = self.needs(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Mean(a), ng)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: Matrix<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "l1 target shape mismatch");
        let n = T::from_usize(p.len()).unwrap();
        let s = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        let ng = self.needs(pred);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::L1 { pred, target }, ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: Matrix<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse target shape mismatch");
        let n = T::from_usize(p.len()).unwrap();
        let s = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let ng = self.needs(pred);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Mse { pred, target }, ng)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "cross entropy target count mismatch");
        let probs = softmax_rows(l, None).expect("unmasked softmax");
        let mut s = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < l.cols(), "target class {t} out of range");
            let row = l.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            s += lse - row[t];
        }
        s /= T::from_usize(targets.len()).unwrap();
        let ng = self.needs(logits);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Soft multi-class dice loss on row-softmax probabilities, averaged over
    /// classes, with additive smoothing [`DICE_SMOOTH`].
    pub fn dice_loss(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "dice target count mismatch");
        let k = l.cols();
        let probs = softmax_rows(l, None).expect("unmasked softmax");
        let (inter, psum, ysum) = dice_stats(&probs, targets);
        let smooth = T::lit(DICE_SMOOTH);
        let mut total = T::zero();
        for c in 0..k {
            total += T::one() - (T::lit(2.0) * inter[c] + smooth) / (psum[c] + ysum[c] + smooth);
        }
        total /= T::from_usize(k).unwrap();
        let ng = self.needs(logits);
        self.push(Matrix::from_vec(1, 1, vec![total]), Op::Dice { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Gradients of the sum of all elements of `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.shape(root);
        grads[root.0] = Some(Matrix::filled(r, c, T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, bound: self.bound.clone() }
    }

    fn propagate(&self, i: usize, op: &Op<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let out = self.value(Var(i));
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = if *ta { bv.matmul_t(*tb, g, true) } else { g.matmul_t(false, bv, !*tb) };
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = if *tb { g.matmul_t(true, av, *ta) } else { av.matmul_t(!*ta, g, false) };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                self.send(grads, *a, || g.zip_map(self.value(*b), |x, y| x * y));
                self.send(grads, *b, || g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow { a, row } => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *row, || column_sums(g));
            }
            Op::ScaleRows { a, s } => {
                let sv = self.value(*s);
                let av = self.value(*a);
                self.send(grads, *a, || {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = sv.get(r, 0);
                        for x in ga.row_mut(r) {
                            *x *= k;
                        }
                    }
                    ga
                });
                self.send(grads, *s, || {
                    Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum())
                });
            }
            Op::Scale { a, k } => self.send(grads, *a, || g.scale(*k)),
            Op::Tanh(a) => self.send(grads, *a, || g.zip_map(out, |gv, y| gv * (T::one() - y * y))),
            Op::Sigmoid(a) => self.send(grads, *a, || g.zip_map(out, |gv, y| gv * y * (T::one() - y))),
            Op::Gelu(a) => self.send(grads, *a, || g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))),
            Op::Softmax(a) => self.send(grads, *a, || softmax_backward(out, g)),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).data();
                let (r, c) = g.shape();
                if self.needs(*x) {
                    let n = T::from_usize(c).unwrap();
                    let mut gx = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gr = g.row(i);
                        let xh = xhat.row(i);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out_row = gx.row_mut(i);
                        for j in 0..c {
                            out_row[j] = rstd[i] * (gr[j] * gam[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                self.send(grads, *gamma, || column_sums(&g.zip_map(xhat, |a, b| a * b)));
                self.send(grads, *beta, || column_sums(g));
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.needs(p) {
                        let part = Matrix::from_vec(rows, c, g.data()[offset * c..(offset + rows) * c].to_vec());
                        accumulate(grads, p, part);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if self.needs(p) {
                        let part = Matrix::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                        accumulate(grads, p, part);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows { a, start } => {
                self.send(grads, *a, || {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = Matrix::zeros(ar, ac);
                    ga.data_mut()[start * ac..(start + g.rows()) * ac].copy_from_slice(g.data());
                    ga
                });
            }
            Op::SliceCols { a, start } => {
                self.send(grads, *a, || {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = Matrix::zeros(ar, ac);
                    for r in 0..ar {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    ga
                });
            }
            Op::GatherRows { a, idx } => {
                self.send(grads, *a, || {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = Matrix::zeros(ar, ac);
                    for (k, &src) in idx.iter().enumerate() {
                        for (x, &y) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *x += y;
                        }
                    }
                    ga
                });
            }
            Op::Reshape(a) => {
                self.send(grads, *a, || {
                    let (ar, ac) = self.shape(*a);
                    g.clone().reshaped(ar, ac)
                });
            }
            Op::RowNormalize { a, norms } => {
                self.send(grads, *a, || {
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = (gr[j] - y[j] * dot) / norms[r];
                        }
                    }
                    ga
                });
            }
            Op::Sum(a) => {
                let (ar, ac) = self.shape(*a);
                self.send(grads, *a, || Matrix::filled(ar, ac, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (ar, ac) = self.shape(*a);
                let n = T::from_usize(ar * ac).unwrap();
                self.send(grads, *a, || Matrix::filled(ar, ac, g.get(0, 0) / n));
            }
            Op::L1 { pred, target } => {
                let n = T::from_usize(target.len()).unwrap();
                let k = g.get(0, 0) / n;
                self.send(grads, *pred, || {
                    self.value(*pred).zip_map(target, |p, t| {
                        let d = p - t;
                        if d > T::zero() {
                            k
                        } else if d < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            Op::Mse { pred, target } => {
                let n = T::from_usize(target.len()).unwrap();
                let k = T::lit(2.0) * g.get(0, 0) / n;
                self.send(grads, *pred, || self.value(*pred).zip_map(target, |p, t| k * (p - t)));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = g.get(0, 0) / T::from_usize(targets.len()).unwrap();
                self.send(grads, *logits, || {
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[t] -= T::one();
                        for x in row.iter_mut() {
                            *x *= k;
                        }
                    }
                    gl
                });
            }
            Op::Dice { logits, targets, probs } => {
                self.send(grads, *logits, || {
                    let k = probs.cols();
                    let (inter, psum, ysum) = dice_stats(probs, targets);
                    let smooth = T::lit(DICE_SMOOTH);
                    let scale = g.get(0, 0) / T::from_usize(k).unwrap();
                    let mut gp = Matrix::zeros(probs.rows(), k);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = gp.row_mut(r);
                        for c in 0..k {
                            let den = psum[c] + ysum[c] + smooth;
                            let num = T::lit(2.0) * inter[c] + smooth;
                            let y = if c == t { T::one() } else { T::zero() };
                            row[c] = -scale * (T::lit(2.0) * y * den - num) / (den * den);
                        }
                    }
                    softmax_backward(probs, &gp)
                });
            }
        }
    }

    fn send(&self, grads: &mut [Option<Matrix<T>>], v: Var, f: impl FnOnce() -> Matrix<T>) {
        if self.needs(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

fn softmax_backward<T: Scalar>(y: &Matrix<T>, g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = g.row(r);
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = yr[j] * (gr[j] - dot);
        }
    }
    out
}

fn dice_stats<T: Scalar>(probs: &Matrix<T>, targets: &[usize]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = probs.cols();
    let mut inter = vec![T::zero(); k];
    let mut psum = vec![T::zero(); k];
    let mut ysum = vec![T::zero(); k];
    for (r, &t) in targets.iter().enumerate() {
        assert!(t < k, "target class {t} out of range");
        for (c, &p) in probs.row(r).iter().enumerate() {
            psum[c] += p;
        }
        inter[t] += probs.get(r, t);
        ysum[t] += T::one();
    }
    (inter, psum, ysum)
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.bound.get(id.0).copied().flatten().and_then(|v| self.wrt(v))
    }

    /// Per-parameter gradients indexed by [`ParamId`]; unused parameters are `None`.
    pub fn into_param_grads(mut self) -> Vec<Option<Matrix<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| self.grads[v.0].take())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let x = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 0.0, 0.0, 5.0]);
        let mask = vec![true, false, true, false, true, true];
        let y = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(y.get(1, 0), 0.0);
        assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_reports_empty_row() {
        let x = Matrix::<f64>::zeros(2, 2);
        assert_eq!(softmax_rows(&x, Some(&[true, false, false, false])), Err(1));
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let a = Matrix::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let b = Matrix::from_fn(4, 2, |r, c| ((r + c * 5) % 7) as f64 * 0.2 - 0.5);
        let gamma = Matrix::from_fn(1, 4, |_, c| 1.0 + 0.1 * c as f64);
        let beta = Matrix::from_fn(1, 4, |_, c| 0.05 * c as f64);
        let err = max_relative_error(&[a, b, gamma, beta], 1e-5, |t, v| {
            let ln = t.layer_norm(v[0], v[2], v[3]);
            let g = t.gelu(ln);
            let s = t.sigmoid(g);
            let h = t.matmul(s, v[1]);
            let h = t.tanh(h);
            let sm = t.softmax(h, None);
            let n = t.row_normalize(v[0]);
            let nt = t.matmul_t(n, false, v[1], false);
            let p = t.mul(sm, nt);
            let q = t.gather_rows(p, &[2, 0, 2]);
            let q2 = t.slice_cols(q, 1, 1);
            let sc = t.scale_rows(q, q2);
            t.sum(sc)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn losses_match_finite_differences() {
        let logits = Matrix::from_fn(6, 3, |r, c| ((r * 5 + c * 7) % 11) as f64 * 0.25 - 1.0);
        let target = Matrix::from_fn(6, 3, |r, c| ((r + c) % 4) as f64 * 0.33 + 0.01);
        let labels = [0usize, 2, 1, 1, 0, 2];
        let err = max_relative_error(&[logits], 1e-5, move |t, v| {
            let ce = t.cross_entropy(v[0], &labels);
            let dice = t.dice_loss(v[0], &labels);
            let l1 = t.l1_loss(v[0], target.clone());
            let mse = t.mse_loss(v[0], target.clone());
            let a = t.add(ce, dice);
            let b = t.add(l1, mse);
            t.add(a, b)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }
}
