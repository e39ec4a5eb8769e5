//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Parameter
//! leaves are bound from a [`ParamStore`]; frozen parameters enter the tape as
//! constants and never receive gradients. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for trainable parameters and for any leaf
//! created with [`Graph::leaf`].
//!
//! All reductions run in a fixed index order, so a forward pass is a pure
//! function of its inputs down to the last bit.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    GateRows(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    Bce { pred: Var, target: Tensor, eps: f64 },
    WeightedSum(Vec<(Var, f64)>),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    MeanRows(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Conv3x3 { x: Var, w: Var, b: Var, col: Tensor },
    ConvT4x4 { x: Var, w: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
pub struct Backward {
    leaf_grads: HashMap<usize, Tensor>,
    params: Gradients,
}

impl Backward {
    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

/// Row permutation that sorts the rows of a 2-D tensor lexicographically.
///
/// Feeding rows through this order makes any subsequent computation
/// independent of the order the rows arrived in.
pub fn canonical_row_order(t: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t.rows()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (t.row(i), t.row(j));
        for (x, y) in a.iter().zip(b) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        i.cmp(&j)
    });
    idx
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean computed as a running update, exact when every term is equal.
pub(crate) fn running_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.into_iter().enumerate() {
        if i == 0 {
            mean = v;
        } else {
            mean += (v - mean) / (i + 1) as f64;
        }
    }
    mean
}

fn row_softmax(row: &[f64], out: &mut [f64], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if ok(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, &x) in row.iter().enumerate() {
        let e = if ok(j) { (x - max).exp() } else { 0.0 };
        out[j] = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), bound: HashMap::new() }
    }

    /// A graph without parameters; only constants and leaves.
    pub fn detached() -> Graph<'static> {
        Graph { store: None, nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A non-parameter input whose gradient is reported by [`Backward::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store.get(id).clone();
        let trainable = store.is_trainable(id);
        let v = self.push(value, Op::Param(id), trainable);
        self.bound.insert(id, v);
        v
    }

    /// `op(a) * op(b)` for 2-D operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = (av.rows(), av.cols());
        let (br, bc) = (bv.rows(), bv.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add: {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    /// Add a bias vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        assert_eq!(bv.len(), c, "add_row: bias {:?} vs {:?}", bv.shape(), av.shape());
        let mut t = av.clone();
        for row in t.data_mut().chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(t, Op::AddRow(a, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Multiply row `i` of `a` by `gate[i]`; `gate` holds one value per row.
    pub fn gate_rows(&mut self, a: Var, gate: Var) -> Var {
        let (av, gv) = (self.value(a), self.value(gate));
        let c = av.cols();
        assert_eq!(gv.len(), av.rows(), "gate_rows: gate {:?} vs {:?}", gv.shape(), av.shape());
        let mut t = av.clone();
        for (row, &g) in t.data_mut().chunks_mut(c).zip(gv.data()) {
            row.iter_mut().for_each(|x| *x *= g);
        }
        let ng = self.ng(a) || self.ng(gate);
        self.push(t, Op::GateRows(a, gate), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax. With `causal_offset = Some(o)`, entry `(i, j)` is
    /// masked out when `j > i + o`.
    pub fn softmax_rows(&mut self, a: Var, causal_offset: Option<usize>) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; r * c];
        let mut allowed = vec![true; c];
        for i in 0..r {
            if let Some(o) = causal_offset {
                for (j, m) in allowed.iter_mut().enumerate() {
                    *m = j <= i + o;
                }
            }
            let mask = causal_offset.map(|_| allowed.as_slice());
            row_softmax(av.row(i), &mut out[i * c..(i + 1) * c], mask);
        }
        let t = Tensor::from_vec(av.shape(), out);
        let ng = self.ng(a);
        self.push(t, Op::Softmax { a }, ng)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), c);
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = av.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * gv[j] + bv[j];
            }
        }
        let t = Tensor::from_vec(av.shape(), out);
        let xhat = Tensor::from_vec(&[r, c], xhat);
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { a, gamma, beta, xhat, inv_std }, ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows with `None` targets are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), r);
        let mut probs = vec![0.0; r * c];
        let mut terms = Vec::new();
        for i in 0..r {
            let row = lv.row(i);
            row_softmax(row, &mut probs[i * c..(i + 1) * c], None);
            if let Some(t) = targets[i] {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                terms.push(-(row[t] - max - lse));
            }
        }
        let count = terms.len();
        assert!(count > 0, "cross_entropy needs at least one target");
        let loss = running_mean(terms);
        let probs = Tensor::from_vec(&[r, c], probs);
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }, ng)
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: Tensor, eps: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "bce: {:?} vs {:?}", pv.shape(), target.shape());
        let loss = running_mean(pv.data().iter().zip(target.data()).map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        }));
        let ng = self.ng(pred);
        self.push(Tensor::scalar(loss), Op::Bce { pred, target, eps }, ng)
    }

    /// `sum_i w_i * x_i` over scalars, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for (i, &(v, w)) in terms.iter().enumerate() {
            let x = w * self.value(v).item();
            acc = if i == 0 { x } else { acc + x };
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows: column mismatch");
            data.extend_from_slice(v.data());
        }
        let r = data.len() / c;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&[r, c], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let t = Tensor::from_vec(&[len, c], av.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(t, Op::SliceRows { a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            assert_eq!(v.rows(), r);
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&[r, total], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let r = av.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[r, len], data), Op::SliceCols { a, start }, ng)
    }

    /// Mean over rows, producing a `[1, cols]` tensor.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[1, c], out), Op::MeanRows(a), ng)
    }

    /// Rows of `table` selected by `ids` (embedding lookup or permutation).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        self.push(Tensor::from_vec(&[ids.len(), c], data), Op::GatherRows { table, ids: ids.to_vec() }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x: [H, W, Cin]`,
    /// `w: [3, 3, Cin, Cout]`, `b: [Cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let [h, wd, cin] = dims3(xv.shape());
        let wv = self.value(w);
        assert_eq!(wv.shape()[..3], [3, 3, cin], "conv3x3 weight {:?} vs input {:?}", wv.shape(), xv.shape());
        let cout = wv.shape()[3];
        let mut col = vec![0.0; h * wd * 9 * cin];
        for y in 0..h {
            for xx in 0..wd {
                let base = (y * wd + xx) * 9 * cin;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let src = (sy as usize * wd + sx as usize) * cin;
                        let dst = base + (ky * 3 + kx) * cin;
                        col[dst..dst + cin].copy_from_slice(&xv.data()[src..src + cin]);
                    }
                }
            }
        }
        let mut out = vec![0.0; h * wd * cout];
        gemm(h * wd, 9 * cin, cout, &col, false, wv.data(), false, &mut out, false);
        let bv = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let col = Tensor::from_vec(&[h * wd, 9 * cin], col);
        self.push(Tensor::from_vec(&[h, wd, cout], out), Op::Conv3x3 { x, w, b, col }, ng)
    }

    /// Transposed convolution with kernel 4, stride 2, padding 1; doubles
    /// both spatial dims. `x: [H, W, Cin]`, `w: [Cin, 4, 4, Cout]`, `b: [Cout]`.
    pub fn conv_transpose4x4(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let [h, wd, cin] = dims3(xv.shape());
        let wv = self.value(w);
        assert_eq!(wv.shape()[..3], [cin, 4, 4], "conv_transpose weight {:?} vs input {:?}", wv.shape(), xv.shape());
        let cout = wv.shape()[3];
        let kk = 16 * cout;
        let mut p = vec![0.0; h * wd * kk];
        gemm(h * wd, cin, kk, xv.data(), false, wv.data(), false, &mut p, false);
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![0.0; oh * ow * cout];
        for_each_tap(h, wd, |src, tap, dst| {
            let s = &p[src * kk + tap * cout..src * kk + (tap + 1) * cout];
            for (o, v) in out[dst * cout..(dst + 1) * cout].iter_mut().zip(s) {
                *o += v;
            }
        });
        let bv = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_vec(&[oh, ow, cout], out), Op::ConvT4x4 { x, w, b }, ng)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Backward {
        let n_params = self.store.map_or(0, |s| s.len());
        let mut params = Gradients::new(n_params);
        let mut leaf_grads = HashMap::new();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    leaf_grads.insert(i, g);
                }
                Op::Param(id) => params.accumulate(*id, &g),
                _ => self.propagate(&node.op, &node.value, g, &mut grads),
            }
        }
        Backward { leaf_grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (out.rows(), out.cols());
                let k = if *ta { av.rows() } else { av.cols() };
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        gemm(k, n, m, bv.data(), *tb, g.data(), true, &mut da, false);
                    } else {
                        gemm(m, n, k, g.data(), false, bv.data(), !*tb, &mut da, false);
                    }
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        gemm(n, m, k, g.data(), true, av.data(), *ta, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), !*ta, g.data(), false, &mut db, false);
                    }
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), db));
                }
            }
            Op::Add(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&sa));
                self.acc(grads, *b, g.reshape(&sb));
            }
            Op::AddRow(a, bias) => {
                if self.ng(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.acc(grads, *bias, Tensor::from_vec(&shape, db));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), d));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::GateRows(a, gate) => {
                let (av, gv) = (self.value(*a), self.value(*gate));
                let c = av.cols();
                if self.ng(*gate) {
                    let d = g
                        .data()
                        .chunks(c)
                        .zip(av.data().chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.acc(grads, *gate, Tensor::from_vec(gv.shape(), d));
                }
                if self.ng(*a) {
                    let mut d = g;
                    for (row, &s) in d.data_mut().chunks_mut(c).zip(gv.data()) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(gg, &x)| gg * gelu_grad(x)).collect();
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gg, &y)| gg * y * (1.0 - y)).collect();
                self.acc(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Softmax { a } => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                let c = out.cols();
                let gv = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, xr) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    let sg = self.value(*gamma).shape().to_vec();
                    let sb = self.value(*beta).shape().to_vec();
                    self.acc(grads, *gamma, Tensor::from_vec(&sg, dg));
                    self.acc(grads, *beta, Tensor::from_vec(&sb, db));
                }
                if self.ng(*a) {
                    let mut d = vec![0.0; out.len()];
                    let nf = c as f64;
                    for (i, (gr, xr)) in g.data().chunks(c).zip(xhat.data().chunks(c)).enumerate() {
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(x, y)| x * y).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            d[i * c + j] = inv_std[i] / nf * (nf * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                    let sa = self.value(*a).shape().to_vec();
                    self.acc(grads, *a, Tensor::from_vec(&sa, d));
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let gs = g.item() / *count as f64;
                let c = probs.cols();
                let mut d = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..c {
                            d[i * c + j] = probs.data()[i * c + j] * gs;
                        }
                        d[i * c + t] -= gs;
                    }
                }
                let shape = self.value(*logits).shape().to_vec();
                self.acc(grads, *logits, Tensor::from_vec(&shape, d));
            }
            Op::Bce { pred, target, eps } => {
                let pv = self.value(*pred);
                let gs = g.item() / pv.len() as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            gs * (p - t) / (p * (1.0 - p))
                        }
                    })
                    .collect();
                self.acc(grads, *pred, Tensor::from_vec(pv.shape(), d));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.acc(grads, v, Tensor::full(&shape, g.item() * w));
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    self.acc(grads, p, Tensor::from_vec(pv.shape(), g.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = Tensor::zeros(av.shape());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let r = out.rows();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                    }
                    self.acc(grads, p, Tensor::from_vec(pv.shape(), d));
                    off += c;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let c = av.cols();
                let len = g.cols();
                let mut d = Tensor::zeros(av.shape());
                for i in 0..g.rows() {
                    d.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let r = av.rows() as f64;
                let mut d = Tensor::zeros(av.shape());
                let c = av.cols();
                for row in d.data_mut().chunks_mut(c) {
                    for (x, gg) in row.iter_mut().zip(g.data()) {
                        *x = gg / r;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut d = Tensor::zeros(tv.shape());
                for (k, &i) in ids.iter().enumerate() {
                    for (x, gg) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *x += gg;
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.reshape(&shape));
            }
            Op::Conv3x3 { x, w, b, col } => {
                let xv = self.value(*x);
                let [h, wd, cin] = dims3(xv.shape());
                let wv = self.value(*w);
                let cout = wv.shape()[3];
                let hw = h * wd;
                if self.ng(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::from_vec(&shape, col_sums(g.data(), cout)));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; 9 * cin * cout];
                    gemm(9 * cin, hw, cout, col.data(), true, g.data(), false, &mut dw, false);
                    self.acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if self.ng(*x) {
                    let mut dcol = vec![0.0; hw * 9 * cin];
                    gemm(hw, cout, 9 * cin, g.data(), false, wv.data(), true, &mut dcol, false);
                    let mut dx = vec![0.0; hw * cin];
                    for y in 0..h {
                        for xx in 0..wd {
                            let base = (y * wd + xx) * 9 * cin;
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    let dst = (sy as usize * wd + sx as usize) * cin;
                                    let src = base + (ky * 3 + kx) * cin;
                                    for c in 0..cin {
                                        dx[dst + c] += dcol[src + c];
                                    }
                                }
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
            }
            Op::ConvT4x4 { x, w, b } => {
                let xv = self.value(*x);
                let [h, wd, cin] = dims3(xv.shape());
                let wv = self.value(*w);
                let cout = wv.shape()[3];
                let kk = 16 * cout;
                if self.ng(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::from_vec(&shape, col_sums(g.data(), cout)));
                }
                let mut dp = vec![0.0; h * wd * kk];
                for_each_tap(h, wd, |src, tap, dst| {
                    dp[src * kk + tap * cout..src * kk + (tap + 1) * cout]
                        .copy_from_slice(&g.data()[dst * cout..(dst + 1) * cout]);
                });
                if self.ng(*w) {
                    let mut dw = vec![0.0; cin * kk];
                    gemm(cin, h * wd, kk, xv.data(), true, &dp, false, &mut dw, false);
                    self.acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; h * wd * cin];
                    gemm(h * wd, kk, cin, &dp, false, wv.data(), true, &mut dx, false);
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
            }
        }
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 3, "expected a [H, W, C] tensor, got {shape:?}");
    [shape[0], shape[1], shape[2]]
}

fn col_sums(data: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in data.chunks(c) {
        for (a, x) in s.iter_mut().zip(row) {
            *a += x;
        }
    }
    s
}

/// Visit every (input cell, kernel tap, output cell) triple of a stride-2,
/// padding-1, kernel-4 transposed convolution over an `h x w` input.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (2 * h as isize, 2 * w as isize);
    for iy in 0..h {
        for ix in 0..w {
            let src = iy * w + ix;
            for ky in 0..4 {
                let oy = 2 * iy as isize + ky as isize - 1;
                if oy < 0 || oy >= oh {
                    continue;
                }
                for kx in 0..4 {
                    let ox = 2 * ix as isize + kx as isize - 1;
                    if ox < 0 || ox >= ow {
                        continue;
                    }
                    f(src, ky * 4 + kx, oy as usize * ow as usize + ox as usize);
                }
            }
        }
    }
}
