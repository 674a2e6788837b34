//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every evaluation. Nodes are appended in
//! topological order, so the backward sweep is a single reverse pass over
//! the tape. Parameters enter the graph as leaves tagged with the id of the
//! [`ParamStore`] they belong to; [`Graph::backward`] returns gradients keyed
//! by that tag.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Silu(Var),
    Gelu(Var),
    Elu(Var),
    Square(Var),
    LogDTanh(Var),
    RmsNorm {
        x: Var,
        inv_rms: Vec<T>,
    },
    LogSoftmax(Var),
    SumCols(Var),
    SumAll(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Scatter(Vec<(Var, Vec<usize>)>),
    SliceCols(Var, usize),
    Tile(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter store.
pub struct Gradients<T> {
    by_param: HashMap<(u64, ParamId), Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for every parameter of `store`, zero where the parameter did
    /// not take part in the computation.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, p)| {
                self.by_param
                    .get(&(store.uid(), id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect()
    }

    /// Gradient with respect to a differentiable input leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c: T = lit(GELU_C);
    let k: T = lit(GELU_K);
    let half: T = lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c: T = lit(GELU_C);
    let k: T = lit(GELU_K);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// `log(1 - tanh(x)^2)` evaluated without cancellation.
pub fn log_dtanh<T: Scalar>(x: T) -> T {
    let two: T = lit(2.0);
    let ax = x.abs();
    // log(1 - tanh^2 x) = 2 (log 2 - |x| - log(1 + exp(-2|x|)))
    two * (lit::<T>(std::f64::consts::LN_2) - ax - (-two * ax).exp().ln_1p())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar_value on non-scalar node");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(
            store.get(id).clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            true,
        )
    }

    /// Parameter bound as a constant (no gradient), e.g. a frozen critic.
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} @ {br}x{bc}");
        let mut out = Tensor::zeros(ar, bc);
        gemm(self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "element-wise shape mismatch");
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise minimum; the gradient goes to the smaller input (first on ties).
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if y < x { y } else { x }, Op::Min(a, b))
    }

    /// `a[n, m] + row[1, m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row broadcast shape");
        let r = self.value(row).data().to_vec();
        let out = Tensor::from_fn(n, m, |i, j| self.value(a).get(i, j) + r[j]);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `a[n, m] * row[1, m]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "mul_row broadcast shape");
        let r = self.value(row).data().to_vec();
        let out = Tensor::from_fn(n, m, |i, j| self.value(a).get(i, j) * r[j]);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x.exp_m1() },
            Op::Elu(a),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `log(1 - tanh(a)^2)`, the log-derivative of `tanh`.
    pub fn log_dtanh(&mut self, a: Var) -> Var {
        self.unary(a, log_dtanh, Op::LogDTanh(a))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)` (no gain).
    pub fn rms_norm(&mut self, x: Var, eps: T) -> Var {
        let (n, m) = self.shape(x);
        let xv = self.value(x);
        let mut inv_rms = Vec::with_capacity(n);
        let mut out = Tensor::zeros(n, m);
        let mt: T = lit(m as f64);
        for i in 0..n {
            let row = xv.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / mt;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RmsNorm { x, inv_rms }, ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = xv.row(i);
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// `[n, m] -> [n, 1]` row sums.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.rows(), 1, |i, _| xv.row(i).iter().copied().sum());
        let ng = self.ng(x);
        self.push(out, Op::SumCols(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / lit(n as f64))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(rows, cols)
            .expect("graph reshape");
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let out = self.value(x).select_rows(&idx);
        let ng = self.ng(x);
        self.push(out, Op::GatherRows(x, idx), ng)
    }

    /// Builds a `[rows, cols]` tensor whose row `idx[r]` is row `r` of the
    /// matching part. Every output row must be covered exactly once.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize) -> Var {
        let cols = parts.first().map_or(0, |(v, _)| self.shape(*v).1);
        let mut out = Tensor::zeros(rows, cols);
        let mut covered = vec![false; rows];
        let mut ng = false;
        for (v, idx) in &parts {
            let pv = self.value(*v);
            assert_eq!(pv.rows(), idx.len(), "scatter part length");
            assert_eq!(pv.cols(), cols, "scatter part width");
            for (r, &dst) in idx.iter().enumerate() {
                assert!(!covered[dst], "scatter row {dst} written twice");
                covered[dst] = true;
                out.row_mut(dst).copy_from_slice(pv.row(r));
            }
            ng |= self.ng(*v);
        }
        assert!(covered.iter().all(|&c| c), "scatter left rows uncovered");
        self.push(out, Op::Scatter(parts), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(xv.rows(), len, |i, j| xv.get(i, start + j));
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    /// Repeats the whole block of rows `times` times.
    pub fn tile(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut data = Vec::with_capacity(n * m * times);
        for _ in 0..times {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::from_vec(n * times, m, data).expect("tile");
        let ng = self.ng(x);
        self.push(out, Op::Tile(x, times), ng)
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// `groups` sequences. `q` is `[groups * lq, d]`, `k` and `v` are
    /// `[groups * lk, d]`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        assert_eq!(self.shape(v), (kr, dk), "attention k/v shape");
        assert_eq!(d, dk, "attention width");
        assert!(groups > 0 && qr % groups == 0 && kr % groups == 0);
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let lq = qr / groups;
        let lk = kr / groups;
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = Tensor::zeros(qr, d);
        let mut probs = vec![T::zero(); groups * heads * lq * lk];
        let mut scores = vec![T::zero(); lk];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..lq {
                    let qrow = &qv.row(g * lq + i)[c0..c0 + dh];
                    let mut mx = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kv.row(g * lk + j)[c0..c0 + dh];
                        let dot: T = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                        *s = dot * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let base = ((g * heads + h) * lq + i) * lk;
                    let orow = &mut out.row_mut(g * lq + i)[c0..c0 + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = *s / z;
                        probs[base + j] = p;
                        let vrow = &vv.row(g * lk + j)[c0..c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut result = Gradients {
            by_param: HashMap::new(),
            leaves: HashMap::new(),
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let acc = |v: Var, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    result.leaves.insert(Var(idx), dy);
                }
                Op::Param { store, id } => {
                    result
                        .by_param
                        .entry((*store, *id))
                        .and_modify(|t| t.add_assign(&dy))
                        .or_insert(dy);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut ga = Tensor::zeros(dy.rows(), bv.rows());
                        gemm(&dy, false, bv, true, &mut ga, false);
                        acc(*a, ga, &mut grads);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut gb = Tensor::zeros(av.cols(), dy.cols());
                        gemm(av, true, &dy, false, &mut gb, false);
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, dy.map(|x| -x), &mut grads);
                    acc(*a, dy, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = dy.zip_map(self.value(*b), |g, y| g * y);
                    let gb = dy.zip_map(self.value(*a), |g, x| g * x);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = dy.clone();
                    let mut gb = dy;
                    for ((x, y), (gx, gy)) in av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .zip(ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()))
                    {
                        if y < x {
                            *gx = T::zero();
                        } else {
                            *gy = T::zero();
                        }
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut gr = Tensor::zeros(1, dy.cols());
                        for i in 0..dy.rows() {
                            for (o, &g) in gr.data_mut().iter_mut().zip(dy.row(i)) {
                                *o += g;
                            }
                        }
                        acc(*row, gr, &mut grads);
                    }
                    acc(*a, dy, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = self.value(*row);
                    if self.ng(*row) {
                        let mut gr = Tensor::zeros(1, dy.cols());
                        for i in 0..dy.rows() {
                            for ((o, &g), &x) in
                                gr.data_mut().iter_mut().zip(dy.row(i)).zip(av.row(i))
                            {
                                *o += g * x;
                            }
                        }
                        acc(*row, gr, &mut grads);
                    }
                    if self.ng(*a) {
                        let r = rv.data();
                        let ga = Tensor::from_fn(dy.rows(), dy.cols(), |i, j| dy.get(i, j) * r[j]);
                        acc(*a, ga, &mut grads);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, dy.map(|g| g * c), &mut grads);
                }
                Op::AddScalar(a) => acc(*a, dy, &mut grads),
                Op::Tanh(a) => {
                    let g = dy.zip_map(&node.value, |g, y| g * (T::one() - y * y));
                    acc(*a, g, &mut grads);
                }
                Op::Exp(a) => {
                    let g = dy.zip_map(&node.value, |g, y| g * y);
                    acc(*a, g, &mut grads);
                }
                Op::Silu(a) => {
                    let g = dy.zip_map(self.value(*a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    });
                    acc(*a, g, &mut grads);
                }
                Op::Gelu(a) => {
                    let g = dy.zip_map(self.value(*a), |g, x| g * gelu_grad(x));
                    acc(*a, g, &mut grads);
                }
                Op::Elu(a) => {
                    let g = dy.zip_map(
                        self.value(*a),
                        |g, x| {
                            if x > T::zero() {
                                g
                            } else {
                                g * x.exp()
                            }
                        },
                    );
                    acc(*a, g, &mut grads);
                }
                Op::Square(a) => {
                    let two: T = lit(2.0);
                    let g = dy.zip_map(self.value(*a), |g, x| g * two * x);
                    acc(*a, g, &mut grads);
                }
                Op::LogDTanh(a) => {
                    let two: T = lit(2.0);
                    let g = dy.zip_map(self.value(*a), |g, x| -g * two * x.tanh());
                    acc(*a, g, &mut grads);
                }
                Op::RmsNorm { x, inv_rms } => {
                    let y = &node.value;
                    let (n, m) = y.shape();
                    let mt: T = lit(m as f64);
                    let mut gx = Tensor::zeros(n, m);
                    for i in 0..n {
                        let yr = y.row(i);
                        let gr = dy.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / mt;
                        for ((o, &g), &yy) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o = (g - yy * dot) * inv_rms[i];
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let (n, m) = y.shape();
                    let mut gx = Tensor::zeros(n, m);
                    for i in 0..n {
                        let s: T = dy.row(i).iter().copied().sum();
                        for ((o, &g), &yy) in gx.row_mut(i).iter_mut().zip(dy.row(i)).zip(y.row(i))
                        {
                            *o = g - yy.exp() * s;
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::SumCols(x) => {
                    let (n, m) = self.shape(*x);
                    let gx = Tensor::from_fn(n, m, |i, _| dy.get(i, 0));
                    acc(*x, gx, &mut grads);
                }
                Op::SumAll(x) => {
                    let (n, m) = self.shape(*x);
                    acc(*x, Tensor::full(n, m, dy.data()[0]), &mut grads);
                }
                Op::Reshape(x) => {
                    let (n, m) = self.shape(*x);
                    acc(*x, dy.reshape(n, m).expect("reshape grad"), &mut grads);
                }
                Op::GatherRows(x, idx) => {
                    if self.ng(*x) {
                        let (n, m) = self.shape(*x);
                        let mut gx = Tensor::zeros(n, m);
                        for (r, &src) in idx.iter().enumerate() {
                            for (o, &g) in gx.row_mut(src).iter_mut().zip(dy.row(r)) {
                                *o += g;
                            }
                        }
                        acc(*x, gx, &mut grads);
                    }
                }
                Op::Scatter(parts) => {
                    for (v, idx) in parts {
                        if self.ng(*v) {
                            acc(*v, dy.select_rows(idx), &mut grads);
                        }
                    }
                }
                Op::SliceCols(x, start) => {
                    let (n, m) = self.shape(*x);
                    let mut gx = Tensor::zeros(n, m);
                    for i in 0..n {
                        gx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::Tile(x, times) => {
                    let (n, m) = self.shape(*x);
                    let mut gx = Tensor::zeros(n, m);
                    for t in 0..*times {
                        for i in 0..n {
                            for (o, &g) in gx.row_mut(i).iter_mut().zip(dy.row(t * n + i)) {
                                *o += g;
                            }
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        self.attention_backward(*q, *k, *v, *groups, *heads, probs, &dy);
                    acc(*q, gq, &mut grads);
                    acc(*k, gk, &mut grads);
                    acc(*v, gv, &mut grads);
                }
            }
        }
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: &[T],
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (qr, d) = qv.shape();
        let kr = kv.rows();
        let lq = qr / groups;
        let lk = kr / groups;
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut gq = Tensor::zeros(qr, d);
        let mut gk = Tensor::zeros(kr, d);
        let mut gv = Tensor::zeros(kr, d);
        let mut dp = vec![T::zero(); lk];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..lq {
                    let base = ((g * heads + h) * lq + i) * lk;
                    let p = &probs[base..base + lk];
                    let dyr = &dy.row(g * lq + i)[c0..c0 + dh];
                    // dV += p^T dy ; dP = dy V^T
                    let mut pdp = T::zero();
                    for j in 0..lk {
                        let vrow = &vv.row(g * lk + j)[c0..c0 + dh];
                        let dot: T = dyr.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                        dp[j] = dot;
                        pdp += p[j] * dot;
                        let gvrow = &mut gv.row_mut(g * lk + j)[c0..c0 + dh];
                        for (o, &x) in gvrow.iter_mut().zip(dyr) {
                            *o += p[j] * x;
                        }
                    }
                    let qrow = &qv.row(g * lq + i)[c0..c0 + dh];
                    for j in 0..lk {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = &kv.row(g * lk + j)[c0..c0 + dh];
                        let gqrow = &mut gq.row_mut(g * lq + i)[c0..c0 + dh];
                        for (o, &x) in gqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let gkrow = &mut gk.row_mut(g * lk + j)[c0..c0 + dh];
                        for (o, &x) in gkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `d loss / d input` for a graph builder.
    fn check_inputs(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.scalar_value(l)
        };
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for (n, v) in vars.iter().enumerate() {
            let analytic = grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[n].rows(), inputs[n].cols()));
            for e in 0..inputs[n].len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[n].data_mut()[e] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        let err = check_inputs(vec![a, b], |g, v| {
            let t = g.tanh(v[0]);
            let e = g.exp(v[1]);
            let m = g.mul(t, e);
            let s = g.silu(m);
            let ge = g.gelu(v[0]);
            let el = g.elu(v[1]);
            let ld = g.log_dtanh(v[0]);
            let x = g.add(s, ge);
            let x = g.sub(x, el);
            let x = g.add(x, ld);
            let sq = g.square(x);
            let mn = g.min(sq, v[1]);
            g.mean_all(mn)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 3, 5);
        let r = rand_tensor(&mut rng, 1, 5);
        let err = check_inputs(vec![a, w, r], |g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row(h, v[2]);
            let h = g.mul_row(h, v[2]);
            let n = g.rms_norm(h, 1e-6);
            let ls = g.log_softmax(n);
            let gathered = g.gather_rows(ls, vec![3, 1]);
            let rest = g.gather_rows(ls, vec![0, 2]);
            let sc = g.scatter_rows(vec![(gathered, vec![0, 2]), (rest, vec![1, 3])], 4);
            let sl = g.slice_cols(sc, 1, 3);
            let tl = g.tile(sl, 2);
            let rs = g.reshape(tl, 4, 6);
            let sc2 = g.sum_cols(rs);
            let sq = g.square(sc2);
            g.sum_all(sq)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, 2 * 3, 4);
        let k = rand_tensor(&mut rng, 2 * 2, 4);
        let v = rand_tensor(&mut rng, 2 * 2, 4);
        let err = check_inputs(vec![q, k, v], |g, x| {
            let o = g.attention(x[0], x[1], x[2], 2, 2);
            let t = g.tanh(o);
            g.sum_all(t)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(2, 2, |i, j| (i + j) as f64));
        let k = g.constant(Tensor::from_fn(3, 2, |i, j| i as f64 - j as f64));
        let v = g.constant(Tensor::full(3, 2, 0.25));
        let o = g.attention(q, k, v, 1, 1);
        for x in g.value(o).data() {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn log_dtanh_is_stable_for_large_inputs() {
        assert!((log_dtanh(0.0f64)).abs() < 1e-15);
        let big = log_dtanh(40.0f64);
        assert!(big.is_finite());
        assert!((big - (2.0 * (2f64.ln() - 40.0))).abs() < 1e-9);
    }
}
