//! Fused multi-head attention over packed (concatenated) sequences.

use super::{acc, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// One attention block: query rows `query_start..+query_len` attend to key
/// rows `key_start..+key_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSegment {
    pub query_start: usize,
    pub query_len: usize,
    pub key_start: usize,
    pub key_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub segments: Vec<AttentionSegment>,
    /// One flag per key row; `true` marks padding that is never attended.
    pub key_padding: Option<Vec<bool>>,
}

impl AttentionLayout {
    fn valid_keys(&self, seg: &AttentionSegment) -> Vec<usize> {
        (seg.key_start..seg.key_start + seg.key_len)
            .filter(|&r| self.key_padding.as_ref().map_or(true, |p| !p[r]))
            .collect()
    }
}

pub(crate) struct AttentionState<T> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub null_value: Option<Var>,
    pub layout: AttentionLayout,
    /// Attention probabilities, per segment then per head, `q_len × n_valid`.
    pub probs: Vec<T>,
}

fn copy_head<T: Real>(src: &[T], width: usize, rows: impl Iterator<Item = usize>, col: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(&src[r * width + col..r * width + col + dh]);
    }
    out
}

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp_fast());
        let z: T = row.iter().copied().sum();
        let inv = T::one() / z;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

pub(crate) fn forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    null_value: Option<&Tensor<T>>,
    layout: &AttentionLayout,
) -> Result<(Tensor<T>, Vec<T>)> {
    let shape_err = |lhs: &Tensor<T>, rhs: &Tensor<T>| Error::Shape {
        op: "attention",
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    };
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape_err(q, k));
    }
    let d = q.cols();
    if k.cols() != d {
        return Err(shape_err(q, k));
    }
    if v.shape() != k.shape() {
        return Err(shape_err(k, v));
    }
    if layout.heads == 0 || d % layout.heads != 0 {
        return Err(Error::contract(format!(
            "hidden size {d} not divisible by {} heads",
            layout.heads
        )));
    }
    if let Some(p) = &layout.key_padding {
        if p.len() != k.rows() {
            return Err(Error::contract("key padding mask length differs from key rows"));
        }
    }
    if let Some(n) = null_value {
        if n.shape() != [d] {
            return Err(shape_err(q, n));
        }
    }
    let (nq, nk) = (q.rows(), k.rows());
    let heads = layout.heads;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut probs = Vec::new();
    for seg in &layout.segments {
        if seg.query_start + seg.query_len > nq || seg.key_start + seg.key_len > nk {
            return Err(Error::contract(format!("attention segment {seg:?} out of bounds")));
        }
        let valid = layout.valid_keys(seg);
        if valid.is_empty() {
            let null = null_value.ok_or_else(|| {
                Error::contract("all keys of a segment are padding and no null state is available")
            })?;
            for r in seg.query_start..seg.query_start + seg.query_len {
                out[r * d..(r + 1) * d].copy_from_slice(null.data());
            }
            continue;
        }
        let (ql, kl) = (seg.query_len, valid.len());
        for h in 0..heads {
            let col = h * dh;
            let qh = copy_head(q.data(), d, seg.query_start..seg.query_start + ql, col, dh);
            let kh = copy_head(k.data(), d, valid.iter().copied(), col, dh);
            let vh = copy_head(v.data(), d, valid.iter().copied(), col, dh);
            let mut s = vec![T::zero(); ql * kl];
            gemm(ql, dh, kl, &qh, false, &kh, true, &mut s, false);
            s.iter_mut().for_each(|x| *x *= scale);
            softmax_rows(&mut s, kl);
            let mut oh = vec![T::zero(); ql * dh];
            gemm(ql, kl, dh, &s, false, &vh, false, &mut oh, false);
            for (i, row) in oh.chunks_exact(dh).enumerate() {
                let r = seg.query_start + i;
                out[r * d + col..r * d + col + dh].copy_from_slice(row);
            }
            probs.extend_from_slice(&s);
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![nq, d], out), probs))
}

pub(crate) fn backward<T: Real>(
    nodes: &[Node<T>],
    state: &AttentionState<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (q, k, v) = (&nodes[state.q.0].value, &nodes[state.k.0].value, &nodes[state.v.0].value);
    let d = q.cols();
    let heads = state.layout.heads;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dnull = vec![T::zero(); d];
    let mut offset = 0;
    for seg in &state.layout.segments {
        let valid = state.layout.valid_keys(seg);
        if valid.is_empty() {
            for r in seg.query_start..seg.query_start + seg.query_len {
                dnull.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
            }
            continue;
        }
        let (ql, kl) = (seg.query_len, valid.len());
        for h in 0..heads {
            let col = h * dh;
            let p = &state.probs[offset..offset + ql * kl];
            offset += ql * kl;
            let qh = copy_head(q.data(), d, seg.query_start..seg.query_start + ql, col, dh);
            let kh = copy_head(k.data(), d, valid.iter().copied(), col, dh);
            let vh = copy_head(v.data(), d, valid.iter().copied(), col, dh);
            let go = copy_head(g, d, seg.query_start..seg.query_start + ql, col, dh);

            let mut dvh = vec![T::zero(); kl * dh];
            gemm(kl, ql, dh, p, true, &go, false, &mut dvh, false);
            let mut ds = vec![T::zero(); ql * kl];
            gemm(ql, dh, kl, &go, false, &vh, true, &mut ds, false);
            for (dsr, pr) in ds.chunks_exact_mut(kl).zip(p.chunks_exact(kl)) {
                let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (x, &pi) in dsr.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            let mut dqh = vec![T::zero(); ql * dh];
            gemm(ql, kl, dh, &ds, false, &kh, false, &mut dqh, false);
            let mut dkh = vec![T::zero(); kl * dh];
            gemm(kl, ql, dh, &ds, true, &qh, false, &mut dkh, false);

            for (i, row) in dqh.chunks_exact(dh).enumerate() {
                let r = seg.query_start + i;
                dq[r * d + col..r * d + col + dh]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, &b)| *a += b);
            }
            for (i, &r) in valid.iter().enumerate() {
                dk[r * d + col..r * d + col + dh]
                    .iter_mut()
                    .zip(&dkh[i * dh..(i + 1) * dh])
                    .for_each(|(a, &b)| *a += b);
                dv[r * d + col..r * d + col + dh]
                    .iter_mut()
                    .zip(&dvh[i * dh..(i + 1) * dh])
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
    for (var, buf) in [(state.q, dq), (state.k, dk), (state.v, dv)] {
        if let Some(dst) = acc(nodes, grads, var) {
            dst.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
        }
    }
    if let Some(n) = state.null_value {
        if let Some(dst) = acc(nodes, grads, n) {
            dst.iter_mut().zip(&dnull).for_each(|(a, &b)| *a += b);
        }
    }
}
