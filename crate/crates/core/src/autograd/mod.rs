//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node that holds its forward value.
//! Nodes only reference earlier nodes, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node once.
//!
//! Operations whose inputs do not require gradients are stored as constants,
//! which makes a graph built with [`Graph::no_grad`] a plain forward evaluator.

mod attention;
mod ops;

pub use attention::{AttentionLayout, AttentionSegment};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention(Box<attention::AttentionState<T>>),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Var,
        rows: Vec<usize>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    MixRows {
        base: Var,
        overridden: Vec<bool>,
    },
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    SegmentMean {
        x: Var,
        segments: Vec<(usize, usize)>,
        include: Option<Vec<bool>>,
        counts: Vec<usize>,
    },
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation; owns forward values and, after
/// [`Graph::backward`], gradients of every leaf that requires them.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward information.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record `op` if any input requires a gradient, otherwise store a constant.
    pub(crate) fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.push(value, op, requires_grad)
    }

    /// Populate gradients of `loss` with respect to every leaf that requires
    /// one. Leaves the loss does not depend on receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts_unchecked(node.value.shape().to_vec(), g));
                continue;
            }
            backward_node(&self.nodes, node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = leaf_grads;
        Ok(())
    }
}

/// Add into the gradient buffer of `v`, allocating it on first use.
fn acc<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn column_sums<T: Real>(g: &[T], cols: usize, dst: &mut [T]) {
    for row in g.chunks_exact(cols) {
        add_into(dst, row);
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = node.value.shape()[1];
            if let Some(da) = acc(nodes, grads, *a) {
                gemm(m, n, k, g, false, val(*b).data(), !*trans_b, da, true);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                if *trans_b {
                    gemm(n, m, k, g, true, val(*a).data(), false, db, true);
                } else {
                    gemm(k, m, n, val(*a).data(), true, g, false, db, true);
                }
            }
        }
        Op::Linear { x, w, b } => {
            let rows = val(*x).rows();
            let (inp, out) = (val(*w).shape()[0], val(*w).shape()[1]);
            if let Some(dx) = acc(nodes, grads, *x) {
                gemm(rows, out, inp, g, false, val(*w).data(), true, dx, true);
            }
            if let Some(dw) = acc(nodes, grads, *w) {
                gemm(inp, rows, out, val(*x).data(), true, g, false, dw, true);
            }
            if let Some(b) = b {
                if let Some(db) = acc(nodes, grads, *b) {
                    column_sums(g, out, db);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
        }
        Op::AddRow { a, bias } => {
            let cols = val(*bias).len();
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(nodes, grads, *bias) {
                column_sums(g, cols, db);
            }
        }
        Op::Scale(a, f) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *f);
            }
        }
        Op::Sum(a) => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = T::from_usize(val(*a).len()).unwrap();
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi * ops::gelu_grad(xi);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = val(*x).data();
            let gv = val(*gain).data();
            let d = gv.len();
            let dn = T::from_usize(d).unwrap();
            let mut xhat = vec![T::zero(); xv.len()];
            for (r, (xr, hr)) in xv.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).enumerate() {
                for (h, &xi) in hr.iter_mut().zip(xr) {
                    *h = (xi - mean[r]) * rstd[r];
                }
            }
            if let Some(dg) = acc(nodes, grads, *gain) {
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((dgi, &gi), &hi) in dg.iter_mut().zip(gr).zip(hr) {
                        *dgi += gi * hi;
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *bias) {
                column_sums(g, d, db);
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let mut dxhat = vec![T::zero(); d];
                for (r, ((gr, hr), dxr)) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        dxr[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = ops::axis_split(node.value.shape(), *axis);
            if let Some(dx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Attention(state) => attention::backward(nodes, state, g, grads),
        Op::CrossEntropy {
            logits,
            rows,
            targets,
            probs,
        } => {
            let v = val(*logits).cols();
            let scale = g[0] / T::from_usize(rows.len()).unwrap();
            if let Some(dl) = acc(nodes, grads, *logits) {
                for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    let p = &probs[k * v..(k + 1) * v];
                    let dr = &mut dl[r * v..(r + 1) * v];
                    for (d, &pi) in dr.iter_mut().zip(p) {
                        *d += scale * pi;
                    }
                    dr[t] -= scale;
                }
            }
        }
        Op::L1 { pred, target, rows } => {
            let f = val(*pred).cols();
            let scale = g[0] / T::from_usize(rows.len() * f).unwrap();
            let (p, t) = (val(*pred).data(), val(*target).data());
            let sign = |i: usize| {
                let diff = p[i] - t[i];
                if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            if let Some(dp) = acc(nodes, grads, *pred) {
                for &r in rows {
                    for i in r * f..(r + 1) * f {
                        dp[i] += scale * sign(i);
                    }
                }
            }
            if let Some(dt) = acc(nodes, grads, *target) {
                for &r in rows {
                    for i in r * f..(r + 1) * f {
                        dt[i] -= scale * sign(i);
                    }
                }
            }
        }
        Op::GatherRows { table, index } => {
            let d = val(*table).cols();
            if let Some(dt) = acc(nodes, grads, *table) {
                for (r, &ix) in index.iter().enumerate() {
                    add_into(&mut dt[ix * d..(ix + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::MixRows { base, overridden } => {
            let d = node.value.cols();
            if let Some(db) = acc(nodes, grads, *base) {
                for (r, &o) in overridden.iter().enumerate() {
                    if !o {
                        add_into(&mut db[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        Op::Cols { x, start } => {
            let width = node.value.cols();
            let full = val(*x).cols();
            if let Some(dx) = acc(nodes, grads, *x) {
                for (gr, dr) in g.chunks_exact(width).zip(dx.chunks_exact_mut(full)) {
                    add_into(&mut dr[*start..*start + width], gr);
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (ca, cb) = (val(*a).cols(), val(*b).cols());
            if let Some(da) = acc(nodes, grads, *a) {
                for (gr, dr) in g.chunks_exact(ca + cb).zip(da.chunks_exact_mut(ca)) {
                    add_into(dr, &gr[..ca]);
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for (gr, dr) in g.chunks_exact(ca + cb).zip(db.chunks_exact_mut(cb)) {
                    add_into(dr, &gr[ca..]);
                }
            }
        }
        Op::SegmentMean {
            x,
            segments,
            include,
            counts,
        } => {
            let d = val(*x).cols();
            if let Some(dx) = acc(nodes, grads, *x) {
                for (s, (&(start, len), &count)) in segments.iter().zip(counts).enumerate() {
                    let inv = T::one() / T::from_usize(count).unwrap();
                    let gs = &g[s * d..(s + 1) * d];
                    for r in start..start + len {
                        if include.as_ref().map_or(true, |m| m[r]) {
                            for (dv, &gv) in dx[r * d..(r + 1) * d].iter_mut().zip(gs) {
                                *dv += gv * inv;
                            }
                        }
                    }
                }
            }
        }
    }
}
