//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes own their values;
//! parameters are copied in from a [`ParamStore`] so the store can be mutated
//! by an optimizer once [`Graph::backward`] has produced [`Grads`].

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::params::{Mat, ParamId, ParamStore};

/// Gather index meaning "emit zero".
pub const GATHER_ZERO: u32 = u32::MAX;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_K * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4;

/// A contiguous block of rows forming one attention sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Rc<Vec<u32>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<Vec<Segment>>,
        probs: Vec<Mat>,
    },
    SqErr {
        pred: Var,
        target: Rc<Mat>,
        scale: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Brings a parameter into the graph. Repeated calls with the same id
    /// return the same node so shared weights accumulate one gradient.
    /// Frozen parameters enter as leaves without a gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), store.is_trainable(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `(1, k)` row to every row of an `(n, k)` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, k) = self.value(x).dim();
        assert_eq!(self.value(row).dim(), (1, k), "add_row shape");
        let value = self.value(x) + self.value(row);
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    pub fn act(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let value = self.value(x).mapv(|v| act.apply(v));
        let ng = self.needs(x);
        self.push(value, Op::Act(x, act), ng)
    }

    /// Row-wise layer normalization with `(1, k)` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, k) = xv.dim();
        let mut xhat = Array2::zeros((n, k));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Linear re-indexing: output element `e` takes input flat element
    /// `index[e]`, or zero for [`GATHER_ZERO`]. Covers reshapes, row
    /// selection, embedding lookup and im2col.
    pub fn gather(&mut self, x: Var, rows: usize, cols: usize, index: Rc<Vec<u32>>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let xv = self.value(x).as_standard_layout();
        let src = xv.as_slice().expect("standard layout");
        let data: Vec<f64> = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("gather shape");
        let ng = self.needs(x);
        self.push(value, Op::Gather { x, index }, ng)
    }

    /// Same data, new shape (row-major).
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(x).len();
        assert_eq!(n, rows * cols, "reshape size");
        let index: Vec<u32> = (0..n as u32).collect();
        self.gather(x, rows, cols, Rc::new(index))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols rows differ");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows cols differ");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Multi-head scaled dot-product attention over row segments.
    /// `q`, `k`, `v` are `(rows, width)`; width must divide by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<Vec<Segment>>,
        causal: bool,
    ) -> Var {
        let (rows, width) = self.value(q).dim();
        assert_eq!(self.value(k).dim(), (rows, width));
        assert_eq!(self.value(v).dim(), (rows, width));
        assert!(heads > 0 && width % heads == 0, "width not divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments.iter() {
            let r = seg.start..seg.start + seg.len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qs = self.value(q).slice(s![r.clone(), c.clone()]);
                let ks = self.value(k).slice(s![r.clone(), c.clone()]);
                let vs = self.value(v).slice(s![r.clone(), c.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
                    if causal {
                        for j in (i + 1)..seg.len {
                            row[j] = f64::NEG_INFINITY;
                        }
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    row /= sum;
                }
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            ng,
        )
    }

    /// `scale * sum((pred - target)^2)` as a `(1, 1)` node.
    pub fn sq_err(&mut self, pred: Var, target: Rc<Mat>, scale: f64) -> Var {
        assert_eq!(self.value(pred).dim(), target.dim(), "sq_err shape");
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Array2::from_elem((1, 1), scale * total);
        let ng = self.needs(pred);
        self.push(value, Op::SqErr { pred, target, scale }, ng)
    }

    /// Gradients of a `(1, 1)` node with respect to every parameter in the graph.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<Option<Mat>> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if param_grads.len() <= id.0 {
                        param_grads.resize(id.0 + 1, None);
                    }
                    accumulate(&mut param_grads[id.0], g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[row.0], gr);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::Scale(x, f) => accumulate(&mut grads[x.0], g * *f),
                Op::Act(x, act) => {
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx)
                        .and(self.value(*x))
                        .and(&node.value)
                        .for_each(|gv, &xv, &yv| *gv *= act.derivative(xv, yv));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.needs(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[beta.0], gb);
                    }
                    if self.needs(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if self.needs(*x) {
                        let k = xhat.ncols() as f64;
                        let dxhat = &g * self.value(*gamma);
                        let mut gx = Array2::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let is = inv_std[r];
                            for c in 0..xhat.ncols() {
                                gx[[r, c]] = is / k * (k * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Gather { x, index } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    {
                        let dst = gx.as_slice_mut().expect("fresh array");
                        for (gv, &i) in g.iter().zip(index.iter()) {
                            if i != GATHER_ZERO {
                                dst[i as usize] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.needs(p) {
                            let gp = g.slice(s![.., c0..c0 + w]).to_owned();
                            accumulate(&mut grads[p.0], gp);
                        }
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        if self.needs(p) {
                            let gp = g.slice(s![r0..r0 + h, ..]).to_owned();
                            accumulate(&mut grads[p.0], gp);
                        }
                        r0 += h;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (rows, width) = self.value(*q).dim();
                    let dh = width / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros((rows, width));
                    let mut gk = Array2::zeros((rows, width));
                    let mut gv = Array2::zeros((rows, width));
                    let mut pi = 0;
                    for seg in segments.iter() {
                        let r = seg.start..seg.start + seg.len;
                        for h in 0..*heads {
                            let c = h * dh..(h + 1) * dh;
                            let p = &probs[pi];
                            pi += 1;
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let qs = self.value(*q).slice(s![r.clone(), c.clone()]);
                            let ks = self.value(*k).slice(s![r.clone(), c.clone()]);
                            let vs = self.value(*v).slice(s![r.clone(), c.clone()]);
                            let dp = go.dot(&vs.t());
                            gv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                            let mut ds = p * &dp;
                            for (i, mut row) in ds.axis_iter_mut(Axis(0)).enumerate() {
                                let dot: f64 = row.sum();
                                for (j, x) in row.iter_mut().enumerate() {
                                    *x -= p[[i, j]] * dot;
                                }
                            }
                            gq.slice_mut(s![r.clone(), c.clone()])
                                .assign(&(ds.dot(&ks) * scale));
                            gk.slice_mut(s![r.clone(), c]).assign(&(ds.t().dot(&qs) * scale));
                        }
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads[q.0], gq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads[k.0], gk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], gv);
                    }
                }
                Op::SqErr { pred, target, scale } => {
                    let gs = g[[0, 0]] * 2.0 * scale;
                    let gp = (self.value(*pred) - &**target) * gs;
                    accumulate(&mut grads[pred.0], gp);
                }
            }
        }
        Grads { grads: param_grads }
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}
