use crate::error::{AutodiffError, Result};
use crate::scalar::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(AutodiffError::ElementCount {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<F> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at2(&self, row: usize, col: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, value: F) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    /// Rows of a rank-2 tensor.
    pub fn row(&self, row: usize) -> &[F] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn sum_all(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn norm(&self) -> F {
        self.data.iter().map(|x| *x * *x).sum::<F>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    // ---- numeric kernels used by the graph -------------------------------

    pub(crate) fn matmul(&self, other: &Self, ta: bool, tb: bool) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (ra, ca) = (self.shape[0], self.shape[1]);
        let (rb, cb) = (other.shape[0], other.shape[1]);
        let (m, k, a_strides) = if ta {
            (ca, ra, (1, ca as isize))
        } else {
            (ra, ca, (ca as isize, 1))
        };
        let (k2, n, b_strides) = if tb {
            (cb, rb, (1, cb as isize))
        } else {
            (rb, cb, (cb as isize, 1))
        };
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, &self.data, a_strides, &other.data, b_strides, &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub(crate) fn zip_broadcast(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(Self {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }
        })?;
        if other.data.len() == 1 && out_shape == self.shape {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.data.len() == 1 && out_shape == other.shape {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_index(&out_shape, &sa, &sb, |ia, ib| {
            data.push(f(self.data[ia], other.data[ib]))
        });
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Sums a broadcast result back down to `shape`.
    pub(crate) fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "sum_to",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let mut out = vec![F::zero(); numel(shape)];
        let st = broadcast_strides(shape, &self.shape);
        let unit = vec![0isize; self.shape.len()];
        let mut k = 0;
        for_each_index(&self.shape, &st, &unit, |i, _| {
            out[i] = out[i] + self.data[k];
            k += 1;
        });
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    pub(crate) fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape.clone(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let st = broadcast_strides(&self.shape, shape);
        let unit = vec![0isize; shape.len()];
        let mut data = Vec::with_capacity(numel(shape));
        for_each_index(shape, &st, &unit, |i, _| data.push(self.data[i]));
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// (outer, extent, inner) decomposition around `axis`.
    pub(crate) fn split_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    pub(crate) fn sum_axis(&self, axis: usize) -> Self {
        let (outer, ext, inner) = self.split_axis(axis);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &self.data[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + *s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Self { shape, data: out }
    }

    pub(crate) fn softmax_axis(&self, axis: usize) -> Self {
        let (outer, ext, inner) = self.split_axis(axis);
        let mut data = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * ext + e) * inner + i;
                let mut mx = F::neg_infinity();
                for e in 0..ext {
                    mx = mx.max(data[idx(e)]);
                }
                let mut total = F::zero();
                for e in 0..ext {
                    let v = (data[idx(e)] - mx).exp();
                    data[idx(e)] = v;
                    total = total + v;
                }
                for e in 0..ext {
                    data[idx(e)] = data[idx(e)] / total;
                }
            }
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub(crate) fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| AutodiffError::InvalidShape {
            op: "concat",
            shape: vec![],
            msg: "no inputs".into(),
        })?;
        if axis >= first.rank() {
            return Err(AutodiffError::InvalidShape {
                op: "concat",
                shape: first.shape.clone(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            shape[axis] += p.shape[axis];
        }
        let outer = numel(&shape[..axis]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let (_, ext, inner) = p.split_axis(axis);
                let chunk = ext * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(AutodiffError::InvalidShape {
                op: "slice",
                shape: self.shape.clone(),
                msg: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, ext, inner) = self.split_axis(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Inverse of `slice_axis`: embeds `self` into zeros of extent `total` along `axis`.
    pub(crate) fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Self> {
        let (outer, ext, inner) = self.split_axis(axis);
        if start + ext > total {
            return Err(AutodiffError::InvalidShape {
                op: "pad",
                shape: self.shape.clone(),
                msg: format!("cannot place at {start} within {total}"),
            });
        }
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut data = vec![F::zero(); numel(&shape)];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            let src = o * ext * inner;
            data[dst..dst + ext * inner].copy_from_slice(&self.data[src..src + ext * inner]);
        }
        Ok(Self { shape, data })
    }
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<isize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0isize; out.len()];
    let mut acc = 1isize;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i] as isize;
    }
    strides
}

/// Walks `shape` in row-major order, yielding the flat offsets into two
/// operands with the given (possibly zero) strides.
fn for_each_index(shape: &[usize], sa: &[isize], sb: &[isize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0isize, 0isize);
    let mut done = 0;
    while done < total {
        for j in 0..shape[last] {
            f(
                (ia + j as isize * sa[last]) as usize,
                (ib + j as isize * sb[last]) as usize,
            );
        }
        done += shape[last];
        // carry into the outer dimensions
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d] as isize;
            ib -= sb[d] * shape[d] as isize;
            idx[d] = 0;
        }
    }
}
