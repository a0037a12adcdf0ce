//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape built during one forward pass. Every operation
//! appends a node holding its value; [`Graph::backward`] walks the tape in
//! reverse and accumulates adjoints. Parameters enter the tape through
//! [`Graph::param`] and their gradients are read back with
//! [`Gradients::param_grads`].
//!
//! Binary elementwise operations broadcast their *right* operand when it is
//! `1x1`, `1xC` or `Rx1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn bcast_kind(a: (usize, usize), b: (usize, usize)) -> Bcast {
    if a == b {
        Bcast::Same
    } else if b == (1, 1) {
        Bcast::Scalar
    } else if b == (1, a.1) {
        Bcast::Row
    } else if b == (a.0, 1) {
        Bcast::Col
    } else {
        panic!("cannot broadcast {b:?} onto {a:?}")
    }
}

#[inline]
fn bidx(kind: Bcast, cols: usize, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Gelu,
    Exp,
    Ln,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Bcast, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Powi(Var, i32),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupMean { x: Var, group: usize, weights: Option<Vec<f64>> },
    GroupSumBroadcast { x: Var, group: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention(AttentionCache),
    Norm2(Var),
    RbfGram { z: Var, sigma: f64 },
    NormProductGram { z: Var, sigma: f64 },
    CenteredTrace(Var, Var),
    TemporalUnfold { x: Var, batch: usize, len: usize, kernel: usize },
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    q_len: usize,
    k_len: usize,
    heads: usize,
    scale: f64,
    /// `batch * heads * q_len * k_len`, row-stochastic over the key axis.
    probs: Vec<f64>,
}

/// Shape description for [`Graph::attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), bound: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient but is not bound to a parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf, true);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter value entering as a constant: gradients stop here.
    pub fn param_detached(&mut self, id: ParamId) -> Var {
        self.push(self.params.get(id).clone(), Op::Leaf, false)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        matmul_acc(av, bv, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = bcast_kind(av.shape(), bv.shape());
        let cols = av.cols();
        let bd = bv.data();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let y = bd[bidx(bc, cols, i)];
            *o = match kind {
                Binary::Add => *o + y,
                Binary::Sub => *o - y,
                Binary::Mul => *o * y,
                Binary::Div => *o / y,
            };
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Binary(kind, bc, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => libm::tanh,
            Unary::Gelu => gelu,
            Unary::Exp => libm::exp,
            Unary::Ln => libm::log,
            Unary::Sqrt => libm::sqrt,
        };
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, Op::Unary(kind, a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn powi(&mut self, a: Var, k: i32) -> Var {
        let out = self.value(a).map(|v| libm::pow(v, k as f64));
        let ng = self.ng(a);
        self.push(out, Op::Powi(a, k), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over rows, producing `1 x cols`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).col_sums();
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Column means, `1 x cols`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).rows() as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums within each row, producing `rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(av.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                let w = pv.cols();
                out.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
                off += w;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows(), width);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&refs);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select_rows(&idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Interleaves equally shaped `n x d` inputs into `(n * k) x d` with
    /// row `i * k + j` taken from row `i` of input `j`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Var {
        let k = parts.len();
        let n = self.value(parts[0]).rows();
        let stacked = self.concat_rows(parts);
        let idx = (0..n * k).map(|r| (r % k) * n + r / k).collect();
        self.gather_rows(stacked, idx)
    }

    /// Weighted mean over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize, weights: Option<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows() % group == 0, "group_mean: rows not divisible by group");
        if let Some(w) = &weights {
            assert_eq!(w.len(), xv.rows(), "group_mean weight length");
        }
        let groups = xv.rows() / group;
        let mut out = Matrix::zeros(groups, xv.cols());
        for g in 0..groups {
            let mut total = 0.0;
            for r in g * group..(g + 1) * group {
                let w = weights.as_ref().map_or(1.0, |w| w[r]);
                if w == 0.0 {
                    continue;
                }
                total += w;
                for (o, v) in out.row_mut(g).iter_mut().zip(xv.row(r)) {
                    *o += w * v;
                }
            }
            if total > 0.0 {
                for o in out.row_mut(g) {
                    *o /= total;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::GroupMean { x, group, weights }, ng)
    }

    /// Replaces every row by the sum of the rows in its block of `group`.
    pub fn group_sum_broadcast(&mut self, x: Var, group: usize) -> Var {
        let out = group_sum_broadcast(self.value(x), group);
        let ng = self.ng(x);
        self.push(out, Op::GroupSumBroadcast { x, group }, ng)
    }

    /// Row-wise layer normalization with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mu) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Scaled dot-product attention, batched over samples and heads.
    ///
    /// `q` is `(batch * q_len) x d`, `k` and `v` are `(batch * k_len) x d`.
    /// Keys whose `key_mask` entry (`batch * k_len`) is false receive zero
    /// probability. Output is `(batch * q_len) x d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape, key_mask: Option<&[bool]>) -> Var {
        let AttentionShape { batch, q_len, k_len, heads } = shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(qv.rows(), batch * q_len, "attention query rows");
        assert_eq!(kv.rows(), batch * k_len, "attention key rows");
        assert_eq!(vv.rows(), batch * k_len, "attention value rows");
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert!(heads > 0 && d % heads == 0, "attention width {d} not divisible by {heads} heads");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), batch * k_len, "attention key mask length");
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = Matrix::zeros(batch * q_len, d);
        let mut logits = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let hs = h * dh;
                for i in 0..q_len {
                    let qi = &qv.row(b * q_len + i)[hs..hs + dh];
                    let mut maxl = f64::NEG_INFINITY;
                    for j in 0..k_len {
                        if key_mask.is_some_and(|m| !m[b * k_len + j]) {
                            logits[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let kj = &kv.row(b * k_len + j)[hs..hs + dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        logits[j] = s;
                        maxl = maxl.max(s);
                    }
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    if maxl == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..k_len {
                        let e = if logits[j] == f64::NEG_INFINITY { 0.0 } else { libm::exp(logits[j] - maxl) };
                        p[j] = e;
                        z += e;
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                    let orow = &mut out.row_mut(b * q_len + i)[hs..hs + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vj = &vv.row(b * k_len + j)[hs..hs + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let cache = AttentionCache { q, k, v, batch, q_len, k_len, heads, scale, probs };
        self.push(out, Op::Attention(cache), ng)
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, laid
    /// out as `batch x heads x q_len x k_len`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// Euclidean (Frobenius) norm of all entries as a `1x1` node.
    /// The gradient at the origin is taken to be zero.
    pub fn norm2(&mut self, a: Var) -> Var {
        let n = libm::sqrt(self.value(a).data().iter().map(|v| v * v).sum::<f64>());
        let ng = self.ng(a);
        self.push(Matrix::scalar(n), Op::Norm2(a), ng)
    }

    /// Gaussian kernel matrix `exp(-|z_i - z_j|^2 / (2 sigma^2))` over the rows of `z`.
    pub fn rbf_gram(&mut self, z: Var, sigma: f64) -> Var {
        let zv = self.value(z);
        let n = zv.rows();
        let mut out = Matrix::zeros(n, n);
        let denom = 2.0 * sigma * sigma;
        for i in 0..n {
            for j in i..n {
                let d2: f64 = zv.row(i).iter().zip(zv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                let k = libm::exp(-d2 / denom);
                out.set(i, j, k);
                out.set(j, i, k);
            }
        }
        let ng = self.ng(z);
        self.push(out, Op::RbfGram { z, sigma }, ng)
    }

    /// Kernel matrix `exp(-|z_i| |z_j| / (2 sigma^2))`, the Frobenius norm of
    /// the outer product `z_i z_j^T`.
    pub fn norm_product_gram(&mut self, z: Var, sigma: f64) -> Var {
        let zv = self.value(z);
        let n = zv.rows();
        let norms: Vec<f64> = (0..n).map(|i| libm::sqrt(zv.row(i).iter().map(|v| v * v).sum::<f64>())).collect();
        let denom = 2.0 * sigma * sigma;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, libm::exp(-norms[i] * norms[j] / denom));
            }
        }
        let ng = self.ng(z);
        self.push(out, Op::NormProductGram { z, sigma }, ng)
    }

    /// `Tr(K J L J)` with `J = I - ones/n` the centering matrix.
    pub fn centered_trace(&mut self, k: Var, l: Var) -> Var {
        let (kv, lv) = (self.value(k), self.value(l));
        assert_eq!(kv.shape(), lv.shape(), "centered_trace shape mismatch");
        assert_eq!(kv.rows(), kv.cols(), "centered_trace needs square matrices");
        let lc = double_center(lv);
        let n = kv.rows();
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                t += kv.get(i, j) * lc.get(j, i);
            }
        }
        let ng = self.ng(k) || self.ng(l);
        self.push(Matrix::scalar(t), Op::CenteredTrace(k, l), ng)
    }

    /// Gathers a `kernel`-frame window around each frame (zero padded at the
    /// sequence edges): `(batch * len) x d` becomes `(batch * len) x (kernel * d)`.
    pub fn temporal_unfold(&mut self, x: Var, batch: usize, len: usize, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "temporal kernel must be odd");
        let xv = self.value(x);
        assert_eq!(xv.rows(), batch * len);
        let d = xv.cols();
        let half = (kernel / 2) as isize;
        let mut out = Matrix::zeros(batch * len, kernel * d);
        for b in 0..batch {
            for t in 0..len {
                for o in 0..kernel {
                    let src = t as isize + o as isize - half;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let src_row = xv.row(b * len + src as usize);
                    out.row_mut(b * len + t)[o * d..(o + 1) * d].copy_from_slice(src_row);
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::TemporalUnfold { x, batch, len, kernel }, ng)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let params = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| v.map(|v| (ParamId(pid), v)))
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, m: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.ng(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    matmul_nt_acc(g, bv, &mut ga);
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    matmul_tn_acc(av, g, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Binary(kind, bc, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = av.cols();
                let bd = bv.data();
                if self.ng(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            let mut m = g.clone();
                            for (i, x) in m.data_mut().iter_mut().enumerate() {
                                *x *= bd[bidx(*bc, cols, i)];
                            }
                            m
                        }
                        Binary::Div => {
                            let mut m = g.clone();
                            for (i, x) in m.data_mut().iter_mut().enumerate() {
                                *x /= bd[bidx(*bc, cols, i)];
                            }
                            m
                        }
                    };
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    let ad = av.data();
                    let gbd = gb.data_mut();
                    for (i, &gi) in g.data().iter().enumerate() {
                        let j = bidx(*bc, cols, i);
                        gbd[j] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * ad[i],
                            Binary::Div => -gi * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = &node.value;
                let mut out = g.clone();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    let (xi, yi) = (x.data()[i], y.data()[i]);
                    *o *= match kind {
                        Unary::Tanh => 1.0 - yi * yi,
                        Unary::Gelu => gelu_grad(xi),
                        Unary::Exp => yi,
                        Unary::Ln => 1.0 / xi,
                        Unary::Sqrt => 0.5 / yi,
                    };
                }
                acc(*a, out);
            }
            Op::Powi(a, k) => {
                let x = val(*a);
                let kf = *k as f64;
                acc(*a, g.zip_map(x, |gi, xi| gi * kf * libm::pow(xi, kf - 1.0)));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, g.zip_map(x, |gi, xi| if xi > *lo && xi < *hi { gi } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, out);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).copy_from_slice(g.row(0));
                }
                acc(*a, out);
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    out.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                acc(*a, out);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, g.clone().reshaped(r, c));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.ng(p) {
                        let mut m = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            m.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(p, m);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let w = g.cols();
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    m.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(*a, m);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if self.ng(p) {
                        let data = g.data()[off * c..(off + r) * c].to_vec();
                        acc(p, Matrix::from_vec(r, c, data));
                    }
                    off += r;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut m = Matrix::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, x) in m.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, m);
            }
            Op::GroupMean { x, group, weights } => {
                let (r, c) = val(*x).shape();
                let mut m = Matrix::zeros(r, c);
                for grp in 0..r / group {
                    let rows = grp * group..(grp + 1) * group;
                    let total: f64 = rows.clone().map(|i| weights.as_ref().map_or(1.0, |w| w[i])).sum();
                    if total == 0.0 {
                        continue;
                    }
                    for i in rows {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]) / total;
                        if w == 0.0 {
                            continue;
                        }
                        for (o, gv) in m.row_mut(i).iter_mut().zip(g.row(grp)) {
                            *o = w * gv;
                        }
                    }
                }
                acc(*x, m);
            }
            Op::GroupSumBroadcast { x, group } => acc(*x, group_sum_broadcast(g, *group)),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = val(*gamma).data();
                let (rows, cols) = xhat.shape();
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        let is = inv_std[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = is * (gr[c] * gam[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    acc(*x, dx);
                }
                if self.ng(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (c, o) in dg.data_mut().iter_mut().enumerate() {
                            *o += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.ng(*beta) {
                    acc(*beta, g.col_sums());
                }
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, &mut acc),
            Op::Norm2(a) => {
                let n = node.value.get(0, 0);
                let x = val(*a);
                let s = if n > 0.0 { g.get(0, 0) / n } else { 0.0 };
                acc(*a, x.scale(s));
            }
            Op::RbfGram { z, sigma } => {
                let zv = val(*z);
                let k = &node.value;
                let (n, d) = zv.shape();
                let inv_s2 = 1.0 / (sigma * sigma);
                let mut dz = Matrix::zeros(n, d);
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = (g.get(i, j) + g.get(j, i)) * k.get(i, j) * inv_s2;
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = zv.get(i, c) - zv.get(j, c);
                            let cur = dz.get(i, c);
                            dz.set(i, c, cur - w * diff);
                        }
                    }
                }
                acc(*z, dz);
            }
            Op::NormProductGram { z, sigma } => {
                let zv = val(*z);
                let k = &node.value;
                let (n, d) = zv.shape();
                let norms: Vec<f64> =
                    (0..n).map(|i| libm::sqrt(zv.row(i).iter().map(|v| v * v).sum::<f64>())).collect();
                let denom = 2.0 * sigma * sigma;
                let mut dz = Matrix::zeros(n, d);
                for i in 0..n {
                    let mut dn = 0.0;
                    for j in 0..n {
                        dn -= (g.get(i, j) * k.get(i, j) + g.get(j, i) * k.get(j, i)) * norms[j] / denom;
                    }
                    if norms[i] > 0.0 {
                        for c in 0..d {
                            dz.set(i, c, dn * zv.get(i, c) / norms[i]);
                        }
                    }
                }
                acc(*z, dz);
            }
            Op::CenteredTrace(k, l) => {
                let s = g.get(0, 0);
                if self.ng(*k) {
                    acc(*k, double_center(val(*l)).transpose().scale(s));
                }
                if self.ng(*l) {
                    acc(*l, double_center(val(*k)).transpose().scale(s));
                }
            }
            Op::TemporalUnfold { x, batch, len, kernel } => {
                let (r, d) = val(*x).shape();
                let half = (*kernel / 2) as isize;
                let mut m = Matrix::zeros(r, d);
                for b in 0..*batch {
                    for t in 0..*len {
                        for o in 0..*kernel {
                            let src = t as isize + o as isize - half;
                            if src < 0 || src >= *len as isize {
                                continue;
                            }
                            let gsl = &g.row(b * len + t)[o * d..(o + 1) * d];
                            for (acc_v, gv) in m.row_mut(b * len + src as usize).iter_mut().zip(gsl) {
                                *acc_v += gv;
                            }
                        }
                    }
                }
                acc(*x, m);
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &Matrix, acc: &mut impl FnMut(Var, Matrix)) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let dh = d / c.heads;
        let mut dq = Matrix::zeros(qv.rows(), d);
        let mut dk = Matrix::zeros(kv.rows(), d);
        let mut dv = Matrix::zeros(vv.rows(), d);
        let mut dp = vec![0.0; c.k_len];
        for b in 0..c.batch {
            for h in 0..c.heads {
                let hs = h * dh;
                for i in 0..c.q_len {
                    let p = &c.probs[((b * c.heads + h) * c.q_len + i) * c.k_len..][..c.k_len];
                    let go = &g.row(b * c.q_len + i)[hs..hs + dh];
                    let mut dot = 0.0;
                    for j in 0..c.k_len {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vv.row(b * c.k_len + j)[hs..hs + dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv.row_mut(b * c.k_len + j)[hs..hs + dh];
                        for (o, x) in dvj.iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                    for j in 0..c.k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * c.scale;
                        let kj = &kv.row(b * c.k_len + j)[hs..hs + dh];
                        let dqi = &mut dq.row_mut(b * c.q_len + i)[hs..hs + dh];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &qv.row(b * c.q_len + i)[hs..hs + dh];
                        let dkj = &mut dk.row_mut(b * c.k_len + j)[hs..hs + dh];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        acc(c.q, dq);
        acc(c.k, dk);
        acc(c.v, dv);
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter bound through [`Graph::param`], in parameter order.
    /// Parameters that did not influence the loss get zeros of the right shape.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<(ParamId, Matrix)> {
        self.params
            .iter()
            .map(|&(pid, v)| {
                let g = self.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = store.get(pid).shape();
                    Matrix::zeros(r, c)
                });
                (pid, g)
            })
            .collect()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let maxv = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - maxv);
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn group_sum_broadcast(x: &Matrix, group: usize) -> Matrix {
    let (r, c) = x.shape();
    assert!(group > 0 && r % group == 0, "group_sum_broadcast: rows not divisible by group");
    let mut out = Matrix::zeros(r, c);
    for grp in 0..r / group {
        let mut sums = vec![0.0; c];
        for i in grp * group..(grp + 1) * group {
            for (s, v) in sums.iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for i in grp * group..(grp + 1) * group {
            out.row_mut(i).copy_from_slice(&sums);
        }
    }
    out
}

/// `J M J` for the centering matrix `J = I - ones/n`.
fn double_center(m: &Matrix) -> Matrix {
    let n = m.rows();
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum::<f64>() / nf).collect();
    let col_means: Vec<f64> = m.col_sums().data().iter().map(|s| s / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, m.get(i, j) - row_means[i] - col_means[j] + grand);
        }
    }
    out
}
