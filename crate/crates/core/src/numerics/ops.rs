use std::sync::Arc;

use super::kernels::{broadcast_map, permute_map};
use super::tape::{unary_forward, BinaryKind, Op, UnaryKind};
use super::{axis_split, DiffTensor, Element, SparseMatrix, Tape};
use crate::{Error, Result};

/// Mirror index `i` (possibly out of range) into `0..n` without repeating the
/// edge sample: `-1 -> 1`, `n -> n - 2`. Works for any overshoot.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

impl<T: Element> Tape<T> {
    fn check_axis(&self, x: DiffTensor, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::shape(format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    fn binary(&mut self, kind: BinaryKind, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let ma = broadcast_map(self.shape(a), &shape);
        let mb = broadcast_map(self.shape(b), &shape);
        let (av, bv) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let value: Vec<T> = match (&ma, &mb) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|k| {
                    let i = ma.as_ref().map_or(k, |m| m[k]);
                    let j = mb.as_ref().map_or(k, |m| m[k]);
                    f(av[i], bv[j])
                })
                .collect(),
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, value, rg, Op::Binary { kind, a, b }))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: DiffTensor, c: f64) -> DiffTensor {
        let c = T::lit(c);
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: DiffTensor, c: f64) -> DiffTensor {
        let c = T::lit(c);
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::AddScalar { x })
    }

    /// Matrix product over the last two axes, batched over the leading ones.
    /// Either operand may be a plain matrix shared across the other's batch.
    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_a: usize = ba.iter().product();
        let batch_b: usize = bb.iter().product();
        let out_batch = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return Err(Error::shape(format!("matmul batch dimensions differ: {sa:?} x {sb:?}")));
        };
        let value = self.matmul_forward(a, b, batch_a, batch_b, m, k, n);
        let mut shape = out_batch;
        shape.extend([m, n]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, value, rg, Op::MatMul { a, b }))
    }

    pub fn reshape(&mut self, x: DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { x }))
    }

    /// `out[i] = x[index[i]]`, with gradients scattered back additively.
    pub(crate) fn gather(&mut self, x: DiffTensor, index: Vec<usize>, shape: Vec<usize>) -> DiffTensor {
        let xv = self.value(x);
        let value = index.iter().map(|&j| xv[j]).collect();
        let rg = self.requires_grad(x);
        self.push(shape, value, rg, Op::Gather { x, index })
    }

    pub fn permute(&mut self, x: DiffTensor, axes: &[usize]) -> Result<DiffTensor> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("invalid permutation {axes:?} for rank {}", shape.len())));
        }
        let index = permute_map(&shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.gather(x, index, out_shape))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: DiffTensor) -> Result<DiffTensor> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[DiffTensor], axis: usize) -> Result<DiffTensor> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(Error::shape(format!("concat along {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut value = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                value.extend_from_slice(&self.value(x)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        Ok(self.push(shape, value, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: DiffTensor, axis: usize, start: usize, len: usize) -> Result<DiffTensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape(format!("narrow {start}..{} exceeds axis {axis} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                index.extend((0..inner).map(|i| (o * n + j) * inner + i));
            }
        }
        let mut out = shape;
        out[axis] = len;
        Ok(self.gather(x, index, out))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: DiffTensor, axis: usize, sizes: &[usize]) -> Result<Vec<DiffTensor>> {
        self.check_axis(x, axis)?;
        if sizes.iter().sum::<usize>() != self.shape(x)[axis] {
            return Err(Error::shape(format!("split sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape(x))));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Numerically guarded softmax: the axis maximum is subtracted first.
    pub fn softmax(&mut self, x: DiffTensor, axis: usize) -> Result<DiffTensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut value = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| xv[base + j * inner]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (xv[base + j * inner] - max).exp();
                    value[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    value[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::Softmax { x, axis }))
    }

    /// Normalises along `axis` (eps = 1e-5 inside the square root), then
    /// applies the per-entry affine `gain`, `bias` of length `shape[axis]`.
    pub fn layer_norm(&mut self, x: DiffTensor, gain: DiffTensor, bias: DiffTensor, axis: usize) -> Result<DiffTensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "layer_norm affine must be [{n}], got {:?} and {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let nf = T::lit(n as f64);
        let eps = T::lit(1e-5);
        let mut value = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mean = (0..n).map(|j| xv[base + j * inner]).sum::<T>() / nf;
                let var = (0..n).map(|j| (xv[base + j * inner] - mean).powi(2)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    let p = base + j * inner;
                    value[p] = (xv[p] - mean) * r * gv[j] + bv[j];
                }
            }
        }
        let rg = [x, gain, bias].iter().any(|&t| self.requires_grad(t));
        Ok(self.push(shape, value, rg, Op::LayerNorm { x, gain, bias, axis, rstd }))
    }

    /// `x / max(||x||_2, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: DiffTensor, axis: usize, eps: f64) -> Result<DiffTensor> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let eps = T::lit(eps);
        let xv = self.value(x);
        let mut value = vec![T::zero(); xv.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let norm = (0..n).map(|j| xv[base + j * inner].powi(2)).sum::<T>().sqrt();
                norms[o * inner + i] = norm;
                let d = norm.max(eps);
                for j in 0..n {
                    value[base + j * inner] = xv[base + j * inner] / d;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::L2Normalize { x, axis, eps, norms }))
    }

    fn unary(&mut self, x: DiffTensor, kind: UnaryKind) -> DiffTensor {
        let value = self.value(x).iter().map(|&v| unary_forward(kind, v)).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Unary { x, kind })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: DiffTensor) -> DiffTensor {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn silu(&mut self, x: DiffTensor) -> DiffTensor {
        self.unary(x, UnaryKind::Silu)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: DiffTensor) -> DiffTensor {
        self.unary(x, UnaryKind::Abs)
    }

    pub fn sum(&mut self, x: DiffTensor) -> DiffTensor {
        let s = self.value(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(vec![], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: DiffTensor) -> DiffTensor {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len().max(1) as f64);
        let rg = self.requires_grad(x);
        self.push(vec![], vec![s], rg, Op::Mean { x })
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: DiffTensor, axis: usize) -> Result<DiffTensor> {
        self.check_axis(x, axis)?;
        let mut shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    value[o * inner + i] += xv[(o * n + j) * inner + i];
                }
            }
        }
        shape[axis] = 1;
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: DiffTensor, axis: usize) -> Result<DiffTensor> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Maximum along `axis`, keeping it with length 1; ties route the gradient
    /// to the first maximal entry.
    pub fn max_axis(&mut self, x: DiffTensor, axis: usize) -> Result<DiffTensor> {
        self.check_axis(x, axis)?;
        let mut shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let p = (o * n + j) * inner + i;
                    if xv[p] > xv[best] {
                        best = p;
                    }
                }
                value.push(xv[best]);
                argmax.push(best);
            }
        }
        shape[axis] = 1;
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::MaxAxis { x, argmax }))
    }

    /// 3x3 cross-correlation with zero padding of one pixel, so `[cin, h, w]`
    /// maps to `[cout, h, w]`.
    pub fn conv2d_3x3(&mut self, input: DiffTensor, kernel: DiffTensor, bias: DiffTensor) -> Result<DiffTensor> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || si[1] == 0 || si[2] == 0 {
            return Err(Error::shape(format!("conv2d_3x3 input must be [c, h>=1, w>=1], got {si:?}")));
        }
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != si[0] {
            return Err(Error::shape(format!("conv2d_3x3 kernel {sk:?} does not match input channels {}", si[0])));
        }
        if self.shape(bias) != [sk[0]] {
            return Err(Error::shape(format!("conv2d_3x3 bias must be [{}], got {:?}", sk[0], self.shape(bias))));
        }
        let value = self.conv_forward(input, kernel, bias);
        let rg = [input, kernel, bias].iter().any(|&t| self.requires_grad(t));
        Ok(self.push(vec![sk[0], si[1], si[2]], value, rg, Op::Conv3x3 { input, kernel, bias }))
    }

    /// Cuts `[c, h, w]` into non-overlapping `win x win` tiles, shaped
    /// `[n_windows, c, win, win]` in row-major window order. Sizes that are not
    /// multiples of `win` are first extended by reflection.
    pub fn window_partition(&mut self, x: DiffTensor, win: usize) -> Result<DiffTensor> {
        if win < 1 {
            return Err(Error::invalid("window size must be >= 1"));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("window_partition expects [c, h, w], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (nh, nw) = (h.div_ceil(win), w.div_ceil(win));
        let mut index = Vec::with_capacity(nh * nw * c * win * win);
        for wy in 0..nh {
            for wx in 0..nw {
                for ch in 0..c {
                    for dy in 0..win {
                        let sy = reflect_index((wy * win + dy) as isize, h);
                        for dx in 0..win {
                            let sx = reflect_index((wx * win + dx) as isize, w);
                            index.push((ch * h + sy) * w + sx);
                        }
                    }
                }
            }
        }
        Ok(self.gather(x, index, vec![nh * nw, c, win, win]))
    }

    /// Inverse of [`Tape::window_partition`], cropping back to `h x w`.
    pub fn window_merge(&mut self, x: DiffTensor, h: usize, w: usize) -> Result<DiffTensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] != s[3] || s[2] == 0 {
            return Err(Error::shape(format!("window_merge expects [n, c, win, win], got {s:?}")));
        }
        let (n, c, win) = (s[0], s[1], s[2]);
        let (nh, nw) = (h.div_ceil(win), w.div_ceil(win));
        if nh * nw != n {
            return Err(Error::shape(format!("{n} windows of {win} cannot tile {h}x{w}")));
        }
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let widx = (y / win) * nw + xx / win;
                    index.push(((widx * c + ch) * win + y % win) * win + xx % win);
                }
            }
        }
        Ok(self.gather(x, index, vec![c, h, w]))
    }

    /// Applies a sparse linear map along the last axis.
    pub fn sparse_apply(&mut self, x: DiffTensor, matrix: Arc<SparseMatrix>) -> Result<DiffTensor> {
        let mut shape = self.shape(x).to_vec();
        if shape.last() != Some(&matrix.n_in) {
            return Err(Error::shape(format!("sparse map expects last axis {}, got {shape:?}", matrix.n_in)));
        }
        let xv = self.value(x);
        let outer = xv.len() / matrix.n_in;
        let mut value = Vec::with_capacity(outer * matrix.n_out);
        for o in 0..outer {
            let row_in = &xv[o * matrix.n_in..(o + 1) * matrix.n_in];
            for row in &matrix.rows {
                value.push(row.iter().map(|&(j, wgt)| row_in[j] * T::lit(wgt)).sum());
            }
        }
        *shape.last_mut().expect("non-empty") = matrix.n_out;
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::Sparse { x, matrix }))
    }
}
