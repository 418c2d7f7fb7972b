//! Raw loops shared by forward and backward passes.

use super::Element;

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat index of `src_shape` it reads
/// under numpy-style broadcasting. `None` when the shapes already agree.
pub(crate) fn broadcast_map(src_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if src_shape == out_shape {
        return None;
    }
    let rank = out_shape.len();
    let offset = rank - src_shape.len();
    let src_strides = strides(src_shape);
    let mut eff = vec![0usize; rank];
    for d in 0..src_shape.len() {
        if src_shape[d] != 1 {
            eff[d + offset] = src_strides[d];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Gather map for a permutation of axes: `out[i] = src[map[i]]`.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Unfolds a `[cin, h, w]` image into `[cin * 9, h * w]` zero-padded 3x3 patches.
pub(crate) fn im2col3<T: Element>(x: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto the image.
pub(crate) fn col2im3<T: Element>(cols: &[T], cin: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * w..(oy + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

/// Batched `c = a @ b` over row-major operands. A batch count of 1 on either
/// side is broadcast against the other.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul<T: Element>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    batch_a: usize,
    batch_b: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    let batch = batch_a.max(batch_b);
    for i in 0..batch {
        let ai = if batch_a == 1 { 0 } else { i };
        let bi = if batch_b == 1 { 0 } else { i };
        T::gemm(
            m,
            k,
            n,
            &a[ai * m * k..(ai + 1) * m * k],
            k as isize,
            1,
            &b[bi * k * n..(bi + 1) * k * n],
            n as isize,
            1,
            T::zero(),
            &mut c[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
}
