//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation eagerly. Values are computed as the
//! graph is built; [`Graph::backward`] walks the tape in reverse. Graphs built
//! with [`Graph::inference`] keep values only and cannot be differentiated.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Real, Tensor, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulCol(Var, Var),
    AddOuter(Var, Var),
    Gelu(Var),
    Elu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor<T>> },
    Gather { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    SegmentMean { x: Var, spans: Vec<Range<usize>> },
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SelectCols { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
    Bce { alpha: Var, labels: Vec<T>, clamped: Vec<bool> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Counts of probabilities clamped by [`Graph::bce`].
pub fn bce_clamp_count() -> u64 {
    BCE_CLAMPS.load(std::sync::atomic::Ordering::Relaxed)
}

static BCE_CLAMPS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients sorted by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (pid, var) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[var.0].take() {
                out.push((pid, g));
            }
        }
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn acc<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

/// Row-wise softmax; entries where `mask` is false get exactly zero probability.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, mask: Option<&dyn Fn(usize, usize) -> bool>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let keep = |c: usize| mask.is_none_or(|m| m(r, c));
        let mut max = T::neg_infinity();
        for c in 0..x.cols {
            if keep(c) && x.at(r, c) > max {
                max = x.at(r, c);
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for c in 0..x.cols {
            if keep(c) {
                let e = (x.at(r, c) - max).exp();
                out.set(r, c, e);
                sum += e;
            }
        }
        for c in 0..x.cols {
            let v = out.at(r, c) / sum;
            out.set(r, c, v);
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// A differentiable graph.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), record: true }
    }

    /// A value-only graph for decoding and evaluation.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), record: false }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar");
        t.data[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        self.push_arc(Arc::new(value), op, inputs)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.shared(id);
        self.nodes.push(Node { value, op: Op::Param, needs_grad: self.record });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = Tensor::matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p - q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `x [n×d] + b [1×d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.shape(), (1, xv.cols), "add_row bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    /// `x [n×d] * s [n×1]` scaling each row.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape(), (xv.rows, 1), "mul_col scale shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let k = sv.data[r];
            for o in out.row_mut(r) {
                *o = *o * k;
            }
        }
        self.push(out, Op::MulCol(x, s), &[x, s])
    }

    /// `col [n×1] + row [1×m]` as an `n×m` matrix.
    pub fn add_outer(&mut self, col: Var, row: Var) -> Var {
        let (cv, rv) = (self.value(col), self.value(row));
        assert_eq!(cv.cols, 1, "add_outer column");
        assert_eq!(rv.rows, 1, "add_outer row");
        let mut out = Tensor::zeros(cv.rows, rv.cols);
        for i in 0..cv.rows {
            for j in 0..rv.cols {
                out.set(i, j, cv.data[i] + rv.data[j]);
            }
        }
        self.push(out, Op::AddOuter(col, row), &[col, row])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v.exp() - T::one() });
        self.push(out, Op::Elu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of shape `1×d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let (n, d) = xv.shape();
        assert_eq!(gv.shape(), (1, d), "layer_norm gamma");
        assert_eq!(bv.shape(), (1, d), "layer_norm beta");
        let dn = T::from_usize(d).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data[c] + bv.data[c]);
            }
        }
        let op = if self.record { Op::LayerNorm { x, gamma, beta, xhat, rstd } } else { Op::Leaf };
        self.push(out, op, &[x, gamma, beta])
    }

    /// Row-wise softmax; masked-out entries (`mask[r*cols+c] == false`) get probability 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols;
        let out = match mask {
            Some(m) => {
                assert_eq!(m.len(), xv.len(), "softmax mask length");
                softmax_rows(xv, Some(&|r: usize, c: usize| m[r * cols + c]))
            }
            None => softmax_rows(xv, None),
        };
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`.
    ///
    /// With `causal`, query row `i` sees key rows `j <= i + (Tk - Tq)`; masked
    /// positions receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.shape();
        let tk = kv.rows;
        assert_eq!(kv.cols, d, "attention key width");
        assert_eq!(vv.shape(), (tk, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let offset = tk as isize - tq as isize;
        let mut out = Tensor::zeros(tq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut scores = Tensor::zeros(tq, tk);
            let sv = scores.view();
            gemm(
                scale,
                &qv.data,
                View::cols_of(tq, d, h * dh, dh),
                &kv.data,
                View::cols_of(tk, d, h * dh, dh).t(),
                T::zero(),
                &mut scores.data,
                sv,
            );
            let p = if causal {
                softmax_rows(&scores, Some(&|i: usize, j: usize| (j as isize) <= i as isize + offset))
            } else {
                softmax_rows(&scores, None)
            };
            gemm(
                T::one(),
                &p.data,
                p.view(),
                &vv.data,
                View::cols_of(tk, d, h * dh, dh),
                T::zero(),
                &mut out.data,
                View::cols_of(tq, d, h * dh, dh),
            );
            probs.push(p);
        }
        let op = if self.record { Op::Attention { q, k, v, heads, probs } } else { Op::Leaf };
        self.push(out, op, &[q, k, v])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "gather index {id} out of range {}", tv.rows);
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.rows > 0, "mean of zero rows");
        let n = T::from_usize(xv.rows).unwrap();
        let mut out = Tensor::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, &v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(T::one() / n);
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// One output row per span holding the mean of that span's rows.
    pub fn segment_mean(&mut self, x: Var, spans: &[Range<usize>]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(spans.len(), xv.cols);
        for (i, s) in spans.iter().enumerate() {
            assert!(s.start < s.end && s.end <= xv.rows, "bad segment {s:?}");
            let n = T::from_usize(s.len()).unwrap();
            for r in s.clone() {
                for (o, &v) in out.row_mut(i).iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            for o in out.row_mut(i) {
                *o = *o / n;
            }
        }
        self.push(out, Op::SegmentMean { x, spans: spans.to_vec() }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows width");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Var {
        let xv = self.value(x);
        assert!(range.end <= xv.rows && range.start <= range.end, "slice_rows range");
        let data = xv.data[range.start * xv.cols..range.end * xv.cols].to_vec();
        let out = Tensor::from_vec(range.len(), xv.cols, data);
        self.push(out, Op::SliceRows { x, start: range.start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Var {
        let xv = self.value(x);
        assert!(range.end <= xv.cols && range.start <= range.end, "slice_cols range");
        let mut out = Tensor::zeros(xv.rows, range.len());
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[range.clone()]);
        }
        self.push(out, Op::SliceCols { x, start: range.start }, &[x])
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, idx.len());
        for r in 0..xv.rows {
            for (j, &c) in idx.iter().enumerate() {
                out.set(r, j, xv.at(r, c));
            }
        }
        self.push(out, Op::SelectCols { x, idx: idx.to_vec() }, &[x])
    }

    /// Summed negative log-likelihood of `targets[t]` under `softmax(logits[t])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "cross_entropy length");
        let probs = softmax_rows(lv, None);
        let mut total = T::zero();
        for (t, &y) in targets.iter().enumerate() {
            let row = lv.row(t);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        let out = Tensor::from_vec(1, 1, vec![total]);
        let op = if self.record {
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs }
        } else {
            Op::Leaf
        };
        self.push(out, op, &[logits])
    }

    /// Summed binary cross-entropy of probabilities `alpha [n×1]` against 0/1 labels.
    /// Probabilities are clamped to `[eps, 1-eps]`; clamped entries pass no gradient.
    pub fn bce(&mut self, alpha: Var, labels: &[T], eps: T) -> Var {
        let av = self.value(alpha);
        assert_eq!(av.len(), labels.len(), "bce length");
        let mut total = T::zero();
        let mut clamped = Vec::with_capacity(labels.len());
        for (&a, &r) in av.data.iter().zip(labels) {
            let c = a.max(eps).min(T::one() - eps);
            clamped.push(c != a);
            if c != a {
                BCE_CLAMPS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
            total += -r * c.ln() - (T::one() - r) * (T::one() - c).ln();
        }
        let out = Tensor::from_vec(1, 1, vec![total]);
        self.push(out, Op::Bce { alpha, labels: labels.to_vec(), clamped }, &[alpha])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let ga = if ta { Tensor::matmul(bv, tb, g, true) } else { Tensor::matmul(g, false, bv, !tb) };
                    acc(&mut grads[a.0], ga);
                }
                if self.wants(b) {
                    let gb = if tb { Tensor::matmul(g, true, av, ta) } else { Tensor::matmul(av, !ta, g, false) };
                    acc(&mut grads[b.0], gb);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.wants(b) {
                    acc(&mut grads[b.0], g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.wants(b) {
                    acc(&mut grads[b.0], g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = g.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
                    acc(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, d));
                }
                if self.wants(b) {
                    let d = g.data.iter().zip(&av.data).map(|(&x, &y)| x * y).collect();
                    acc(&mut grads[b.0], Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    acc(&mut grads[a.0], g.map(|x| x * s));
                }
            }
            &Op::AddRow(x, b) => {
                if self.wants(x) {
                    acc(&mut grads[x.0], g.clone());
                }
                if self.wants(b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads[b.0], gb);
                }
            }
            &Op::MulCol(x, s) => {
                let (xv, sv) = (self.value(x), self.value(s));
                if self.wants(x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows {
                        let k = sv.data[r];
                        for o in gx.row_mut(r) {
                            *o = *o * k;
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                if self.wants(s) {
                    let mut gs = Tensor::zeros(sv.rows, 1);
                    for r in 0..g.rows {
                        gs.data[r] = g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum();
                    }
                    acc(&mut grads[s.0], gs);
                }
            }
            &Op::AddOuter(col, row) => {
                if self.wants(col) {
                    let mut gc = Tensor::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        gc.data[r] = g.row(r).iter().copied().sum();
                    }
                    acc(&mut grads[col.0], gc);
                }
                if self.wants(row) {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads[row.0], gr);
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let d = g.data.iter().zip(&xv.data).map(|(&gg, &v)| gg * gelu_parts(v).1).collect();
                acc(&mut grads[x.0], Tensor::from_vec(g.rows, g.cols, d));
            }
            &Op::Elu(x) => {
                let xv = self.value(x);
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(&gg, &v)| if v > T::zero() { gg } else { gg * v.exp() })
                    .collect();
                acc(&mut grads[x.0], Tensor::from_vec(g.rows, g.cols, d));
            }
            &Op::LeakyRelu(x, slope) => {
                let xv = self.value(x);
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(&gg, &v)| if v > T::zero() { gg } else { gg * slope })
                    .collect();
                acc(&mut grads[x.0], Tensor::from_vec(g.rows, g.cols, d));
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g.data.iter().zip(&y.data).map(|(&gg, &s)| gg * s * (T::one() - s)).collect();
                acc(&mut grads[x.0], Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let (n, d) = xhat.shape();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = Tensor::zeros(1, d);
                    let mut gb = Tensor::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            gg.data[c] += g.at(r, c) * xhat.at(r, c);
                            gb.data[c] += g.at(r, c);
                        }
                    }
                    if self.wants(*gamma) {
                        acc(&mut grads[gamma.0], gg);
                    }
                    if self.wants(*beta) {
                        acc(&mut grads[beta.0], gb);
                    }
                }
                if self.wants(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut gx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dxh = g.at(r, c) * gv.data[c];
                            m1 += dxh;
                            m2 += dxh * xhat.at(r, c);
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for c in 0..d {
                            let dxh = g.at(r, c) * gv.data[c];
                            gx.set(r, c, rstd[r] * (dxh - m1 - xhat.at(r, c) * m2));
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
            }
            &Op::Softmax { x } => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.cols {
                        gx.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                    }
                }
                acc(&mut grads[x.0], gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, d) = qv.shape();
                let tk = kv.rows;
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut gq = Tensor::zeros(tq, d);
                let mut gk = Tensor::zeros(tk, d);
                let mut gvv = Tensor::zeros(tk, d);
                for (h, p) in probs.iter().enumerate() {
                    let hq = View::cols_of(tq, d, h * dh, dh);
                    let hk = View::cols_of(tk, d, h * dh, dh);
                    // dV_h = Pᵀ dO_h
                    gemm(T::one(), &p.data, p.view().t(), &g.data, hq, T::zero(), &mut gvv.data, hk);
                    // dP = dO_h V_hᵀ
                    let mut dp = Tensor::zeros(tq, tk);
                    let dpv = dp.view();
                    gemm(T::one(), &g.data, hq, &vv.data, hk.t(), T::zero(), &mut dp.data, dpv);
                    let mut ds = Tensor::zeros(tq, tk);
                    for i in 0..tq {
                        let dot: T = p.row(i).iter().zip(dp.row(i)).map(|(&a, &b)| a * b).sum();
                        for j in 0..tk {
                            ds.set(i, j, p.at(i, j) * (dp.at(i, j) - dot));
                        }
                    }
                    gemm(scale, &ds.data, ds.view(), &kv.data, hk, T::zero(), &mut gq.data, hq);
                    gemm(scale, &ds.data, ds.view().t(), &qv.data, hq, T::zero(), &mut gk.data, hk);
                }
                if self.wants(*q) {
                    acc(&mut grads[q.0], gq);
                }
                if self.wants(*k) {
                    acc(&mut grads[k.0], gk);
                }
                if self.wants(*v) {
                    acc(&mut grads[v.0], gvv);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.rows, tv.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(&mut grads[table.0], gt);
            }
            &Op::MeanRows(x) => {
                let xv = self.value(x);
                let inv = T::one() / T::from_usize(xv.rows).unwrap();
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(&g.data) {
                        *o = v * inv;
                    }
                }
                acc(&mut grads[x.0], gx);
            }
            Op::SegmentMean { x, spans } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for (i, s) in spans.iter().enumerate() {
                    let inv = T::one() / T::from_usize(s.len()).unwrap();
                    for r in s.clone() {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v * inv;
                        }
                    }
                }
                acc(&mut grads[x.0], gx);
            }
            &Op::SumAll(x) => {
                let (r, c) = self.shape(x);
                acc(&mut grads[x.0], Tensor::filled(r, c, g.data[0]));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        let d = g.data[off * c..(off + r) * c].to_vec();
                        acc(&mut grads[p.0], Tensor::from_vec(r, c, d));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.wants(p) {
                        let mut gp = Tensor::zeros(r, c);
                        for row in 0..r {
                            gp.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                        }
                        acc(&mut grads[p.0], gp);
                    }
                    off += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let (r, c) = self.shape(x);
                let mut gx = Tensor::zeros(r, c);
                gx.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                acc(&mut grads[x.0], gx);
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.shape(x);
                let mut gx = Tensor::zeros(r, c);
                for row in 0..r {
                    gx.row_mut(row)[start..start + g.cols].copy_from_slice(g.row(row));
                }
                acc(&mut grads[x.0], gx);
            }
            Op::SelectCols { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for row in 0..r {
                    for (j, &col) in idx.iter().enumerate() {
                        let v = gx.at(row, col) + g.at(row, j);
                        gx.set(row, col, v);
                    }
                }
                acc(&mut grads[x.0], gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = g.data[0];
                let mut gl = probs.clone();
                for (t, &y) in targets.iter().enumerate() {
                    let v = gl.at(t, y) - T::one();
                    gl.set(t, y, v);
                }
                gl.scale_assign(s);
                acc(&mut grads[logits.0], gl);
            }
            Op::Bce { alpha, labels, clamped } => {
                let s = g.data[0];
                let av = self.value(*alpha);
                let d = av
                    .data
                    .iter()
                    .zip(labels)
                    .zip(clamped)
                    .map(|((&a, &r), &cl)| {
                        if cl {
                            T::zero()
                        } else {
                            s * (-r / a + (T::one() - r) / (T::one() - a))
                        }
                    })
                    .collect();
                acc(&mut grads[alpha.0], Tensor::from_vec(av.rows, av.cols, d));
            }
        }
    }
}
