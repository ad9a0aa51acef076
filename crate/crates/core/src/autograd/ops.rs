use super::{attention, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 x (1 + tanh u)` written as `x * sigmoid(2u)`, which avoids `tanh`.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_gate<T: Real>(x: T) -> T {
    let c2 = T::from(2.0 * GELU_C).unwrap();
    let a = T::from(GELU_A).unwrap();
    T::one() / (T::one() + (-c2 * (x + a * x * x * x)).exp_fast())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c2 = T::from(2.0 * GELU_C).unwrap();
    let a3 = T::from(3.0 * GELU_A).unwrap();
    let s = gelu_gate(x);
    s + x * s * (T::one() - s) * c2 * (T::one() + a3 * x * x)
}

/// `(outer, n, inner)` such that `axis` has `n` entries with stride `inner`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn effective_rows(rows: usize, mask: Option<&[bool]>, op: &str) -> Result<Vec<usize>> {
    if let Some(m) = mask {
        if m.len() != rows {
            return Err(Error::contract(format!(
                "{op}: mask length {} does not match {rows} positions",
                m.len()
            )));
        }
    }
    let selected: Vec<usize> = (0..rows).filter(|&r| mask.map_or(true, |m| m[r])).collect();
    if selected.is_empty() {
        return Err(Error::contract(format!("{op}: no positions selected by mask")));
    }
    Ok(selected)
}

impl<T: Real> Graph<T> {
    /// Matrix product `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` with `b` stored as `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(av, "matmul")?;
        let (br, bc) = matrix_dims(bv, "matmul")?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        Ok(self.record(value, &[a, b], || Op::MatMul { a, b, trans_b }))
    }

    /// `x (N×in) · w (in×out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, inp) = matrix_dims(xv, "linear")?;
        let (win, out) = matrix_dims(wv, "linear")?;
        if inp != win {
            return Err(Error::Shape {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut data = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out || bv.rank() != 1 {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: vec![out],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in data.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, inp, out, xv.data(), false, wv.data(), false, &mut data, b.is_some());
        let value = Tensor::from_parts_unchecked(vec![rows, out], data);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.record(value, &inputs, || Op::Linear { x, w, b }))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, op)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts_unchecked(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.record(value, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(value, &[a, b], || Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(value, &[a, b], || Op::Mul(a, b)))
    }

    /// Add a vector to every row (the only broadcast supported).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rank() != 1 || av.cols() != bv.len() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(bv.len()) {
            row.iter_mut().zip(bv.data()).for_each(|(x, &b)| *x += b);
        }
        let value = Tensor::from_parts_unchecked(av.shape().to_vec(), data);
        Ok(self.record(value, &[a, bias], || Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let value = self.value(a).map(|x| x * f);
        self.record(value, &[a], || Op::Scale(a, f))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record(Tensor::scalar(s), &[a], || Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        self.record(Tensor::scalar(s), &[a], || Op::Mean(a))
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.record(value, &[a], || Op::Gelu(a))
    }

    /// Normalize each row to zero mean and unit variance, then apply
    /// `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let dn = T::from_usize(d).unwrap();
        let eps = T::from_f64_lossy(eps);
        let rows = xv.rows();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = vec![T::zero(); xv.len()];
        for (xr, yr) in xv.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mu = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..d {
                yr[j] = (xr[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::from_parts_unchecked(xv.shape().to_vec(), data);
        Ok(self.record(value, &[x, gain, bias], || Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        }))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let value = softmax_along(xv, axis);
        Ok(self.record(value, &[x], || Op::Softmax { x, axis }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits (T×V)`, over positions where `mask` is true (all when `None`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = matrix_dims(lv, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy targets",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                what: "cross_entropy target vocabulary",
                index: bad,
                bound: v,
            });
        }
        let rows = effective_rows(t, mask, "cross_entropy")?;
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = T::zero();
        for &r in &rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - max).exp_fast()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[targets[r]];
            probs.extend(row.iter().map(|&x| (x - log_z).exp_fast()));
        }
        let loss = total / T::from_usize(rows.len()).unwrap();
        let sel_targets: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
        Ok(self.record(Tensor::scalar(loss), &[logits], || Op::CrossEntropy {
            logits,
            rows,
            targets: sel_targets,
            probs,
        }))
    }

    /// Mean absolute difference over rows where `mask` is true, averaged
    /// over features.
    pub fn l1_loss(&mut self, pred: Var, target: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        same_shape(pv, tv, "l1_loss")?;
        let f = pv.cols();
        let rows = effective_rows(pv.rows(), mask, "l1_loss")?;
        let mut total = T::zero();
        for &r in &rows {
            for i in r * f..(r + 1) * f {
                total += (pv.data()[i] - tv.data()[i]).abs();
            }
        }
        let loss = total / T::from_usize(rows.len() * f).unwrap();
        Ok(self.record(Tensor::scalar(loss), &[pred, target], || Op::L1 { pred, target, rows }))
    }

    /// Rows of `table` selected by `index` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = matrix_dims(tv, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::contract("gather_rows with empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &ix in index {
            if ix >= n {
                return Err(Error::Index {
                    what: "gather_rows table",
                    index: ix,
                    bound: n,
                });
            }
            data.extend_from_slice(tv.row(ix));
        }
        let value = Tensor::from_parts_unchecked(vec![index.len(), d], data);
        let index = index.to_vec();
        Ok(self.record(value, &[table], || Op::GatherRows { table, index }))
    }

    /// Replace the given rows of `base` by constant rows; gradients only flow
    /// to rows that were kept.
    pub fn mix_rows(&mut self, base: Var, overrides: &[(usize, &[T])]) -> Result<Var> {
        let bv = self.value(base);
        let (n, d) = matrix_dims(bv, "mix_rows")?;
        let mut data = bv.data().to_vec();
        let mut overridden = vec![false; n];
        for &(r, row) in overrides {
            if r >= n {
                return Err(Error::Index {
                    what: "mix_rows row",
                    index: r,
                    bound: n,
                });
            }
            if row.len() != d {
                return Err(Error::Shape {
                    op: "mix_rows",
                    lhs: vec![d],
                    rhs: vec![row.len()],
                });
            }
            data[r * d..(r + 1) * d].copy_from_slice(row);
            overridden[r] = true;
        }
        let value = Tensor::from_parts_unchecked(vec![n, d], data);
        Ok(self.record(value, &[base], || Op::MixRows { base, overridden }))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = matrix_dims(xv, "cols")?;
        if width == 0 || start + width > c {
            return Err(Error::contract(format!("column slice {start}+{width} of {c} columns")));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in xv.data().chunks_exact(c) {
            data.extend_from_slice(&r[start..start + width]);
        }
        let value = Tensor::from_parts_unchecked(vec![rows, width], data);
        Ok(self.record(value, &[x], || Op::Cols { x, start }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = matrix_dims(av, "concat_cols")?;
        let (rb, cb) = matrix_dims(bv, "concat_cols")?;
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for (x, y) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        let value = Tensor::from_parts_unchecked(vec![ra, ca + cb], data);
        Ok(self.record(value, &[a, b], || Op::ConcatCols(a, b)))
    }

    /// Mean over the rows of each `(start, len)` segment, skipping rows where
    /// `include` is false. Output has one row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)], include: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = matrix_dims(xv, "segment_mean")?;
        if let Some(m) = include {
            if m.len() != rows {
                return Err(Error::contract("segment_mean mask length"));
            }
        }
        if segments.is_empty() {
            return Err(Error::contract("segment_mean with no segments"));
        }
        let mut data = vec![T::zero(); segments.len() * d];
        let mut counts = Vec::with_capacity(segments.len());
        for (s, &(start, len)) in segments.iter().enumerate() {
            if start + len > rows {
                return Err(Error::Index {
                    what: "segment_mean rows",
                    index: start + len,
                    bound: rows,
                });
            }
            let out = &mut data[s * d..(s + 1) * d];
            let mut count = 0;
            for r in start..start + len {
                if include.map_or(true, |m| m[r]) {
                    out.iter_mut().zip(xv.row(r)).for_each(|(o, &v)| *o += v);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::contract(format!("segment {s} has no unpadded rows to pool")));
            }
            let inv = T::one() / T::from_usize(count).unwrap();
            out.iter_mut().for_each(|o| *o *= inv);
            counts.push(count);
        }
        let value = Tensor::from_parts_unchecked(vec![segments.len(), d], data);
        let segments = segments.to_vec();
        let include = include.map(<[bool]>::to_vec);
        Ok(self.record(value, &[x], || Op::SegmentMean {
            x,
            segments,
            include,
            counts,
        }))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `Nq×d`, `k` and `v` are `Nk×d`. Each layout segment attends
    /// from a block of query rows to a block of key rows. A segment whose
    /// keys are all padding outputs `null_value` for every query row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        null_value: Option<Var>,
        layout: &AttentionLayout,
    ) -> Result<Var> {
        let (value, probs) = attention::forward(
            self.value(q),
            self.value(k),
            self.value(v),
            null_value.map(|n| self.value(n)),
            layout,
        )?;
        let inputs: Vec<Var> = [Some(q), Some(k), Some(v), null_value].into_iter().flatten().collect();
        let layout = layout.clone();
        Ok(self.record(value, &inputs, || {
            Op::Attention(Box::new(attention::AttentionState {
                q,
                k,
                v,
                null_value,
                layout,
                probs,
            }))
        }))
    }
}

use super::AttentionLayout;

pub(crate) fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let e = (src[idx(j)] - max).exp_fast();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[idx(j)] = out[idx(j)] / z;
            }
        }
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out)
}
