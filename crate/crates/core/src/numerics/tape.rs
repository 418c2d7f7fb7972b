use std::sync::Arc;

use super::kernels::{self, batched_matmul, col2im3, im2col3};
use super::{axis_split, Element};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiffTensor(pub(crate) usize);

/// Row-sparse linear map applied along the last axis of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n_in: usize,
    pub n_out: usize,
    /// For each output entry, the `(input index, weight)` pairs it sums.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    /// Applies the map to a plain vector of length `n_in`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Gelu,
    Silu,
    Abs,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: DiffTensor, b: DiffTensor },
    Scale { x: DiffTensor, c: T },
    AddScalar { x: DiffTensor },
    MatMul { a: DiffTensor, b: DiffTensor },
    Reshape { x: DiffTensor },
    Gather { x: DiffTensor, index: Vec<usize> },
    Concat { xs: Vec<DiffTensor>, axis: usize },
    Softmax { x: DiffTensor, axis: usize },
    LayerNorm { x: DiffTensor, gain: DiffTensor, bias: DiffTensor, axis: usize, rstd: Vec<T> },
    L2Normalize { x: DiffTensor, axis: usize, eps: T, norms: Vec<T> },
    Unary { x: DiffTensor, kind: UnaryKind },
    Sum { x: DiffTensor },
    Mean { x: DiffTensor },
    SumAxis { x: DiffTensor, axis: usize },
    MaxAxis { x: DiffTensor, argmax: Vec<usize> },
    Conv3x3 { input: DiffTensor, kernel: DiffTensor, bias: DiffTensor },
    Sparse { x: DiffTensor, matrix: Arc<SparseMatrix> },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Operation record for reverse-mode differentiation.
///
/// Values are immutable once recorded. Leaf gradients accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
pub struct Tape<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn new_leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<DiffTensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// A differentiable input; its gradient is available after `backward`.
    pub fn leaf(&mut self, values: Vec<T>, shape: &[usize]) -> Result<DiffTensor> {
        self.new_leaf(values, shape, true)
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, values: Vec<T>, shape: &[usize]) -> Result<DiffTensor> {
        self.new_leaf(values, shape, false)
    }

    /// Convenience for building leaves or constants from `f64` data.
    pub fn from_f64(&mut self, values: &[f64], shape: &[usize], requires_grad: bool) -> Result<DiffTensor> {
        self.new_leaf(values.iter().map(|&v| T::lit(v)).collect(), shape, requires_grad)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> DiffTensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        DiffTensor(self.nodes.len() - 1)
    }

    pub fn value(&self, t: DiffTensor) -> &[T] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: DiffTensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn requires_grad(&self, t: DiffTensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, t: DiffTensor) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Scalar value of a one-element tensor, widened to `f64`.
    pub fn item(&self, t: DiffTensor) -> f64 {
        self.nodes[t.0].value[0].as_f64()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a one-element `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: DiffTensor) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Lazily-allocated gradient buffer for a parent, or None when it is constant.
        macro_rules! slot {
            ($t:expr) => {{
                let id = $t.0;
                if nodes[id].requires_grad {
                    let len = nodes[id].value.len();
                    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let map_a = kernels::broadcast_map(&nodes[a.0].shape, &node.shape);
                let map_b = kernels::broadcast_map(&nodes[b.0].shape, &node.shape);
                let ia = |k: usize| map_a.as_ref().map_or(k, |m| m[k]);
                let ib = |k: usize| map_b.as_ref().map_or(k, |m| m[k]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            g.iter().enumerate().for_each(|(k, &gk)| ga[ia(k)] += gk)
                        }
                        BinaryKind::Mul => {
                            g.iter().enumerate().for_each(|(k, &gk)| ga[ia(k)] += gk * bv[ib(k)])
                        }
                    }
                }
                if let Some(gb) = slot!(b) {
                    match kind {
                        BinaryKind::Add => g.iter().enumerate().for_each(|(k, &gk)| gb[ib(k)] += gk),
                        BinaryKind::Sub => g.iter().enumerate().for_each(|(k, &gk)| gb[ib(k)] -= gk),
                        BinaryKind::Mul => {
                            g.iter().enumerate().for_each(|(k, &gk)| gb[ib(k)] += gk * av[ia(k)])
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch_a: usize = sa[..sa.len() - 2].iter().product();
                let batch_b: usize = sb[..sb.len() - 2].iter().product();
                let batch = batch_a.max(batch_b);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(a) {
                    for bi in 0..batch {
                        let ai = if batch_a == 1 { 0 } else { bi };
                        let bj = if batch_b == 1 { 0 } else { bi };
                        // dA = dC @ B^T
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bv[bj * k * n..(bj + 1) * k * n],
                            1,
                            n as isize,
                            T::one(),
                            &mut ga[ai * m * k..(ai + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = slot!(b) {
                    for bi in 0..batch {
                        let ai = if batch_a == 1 { 0 } else { bi };
                        let bj = if batch_b == 1 { 0 } else { bi };
                        // dB = A^T @ dC
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[ai * m * k..(ai + 1) * m * k],
                            1,
                            k as isize,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            T::one(),
                            &mut gb[bj * k * n..(bj + 1) * k * n],
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = slot!(x) {
                    index.iter().zip(g).for_each(|(&j, &s)| gx[j] += s);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for x in xs {
                    let len = nodes[x.0].shape[*axis];
                    if let Some(gx) = slot!(x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                if let Some(gx) = slot!(x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: T = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..n {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, axis, rstd } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let nf = T::lit(n as f64);
                // xhat is recomputed from x and the stored rstd.
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let need_x = nodes[x.0].requires_grad;
                let mut gx_acc = if need_x { Some(vec![T::zero(); xv.len()]) } else { None };
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let r = rstd[o * inner + i];
                        let mean = (0..n).map(|j| xv[base + j * inner]).sum::<T>() / nf;
                        for j in 0..n {
                            let p = base + j * inner;
                            xhat[j] = (xv[p] - mean) * r;
                            dxhat[j] = g[p] * gv[j];
                            dgain[j] += g[p] * xhat[j];
                            dbias[j] += g[p];
                        }
                        if let Some(gx) = gx_acc.as_mut() {
                            let m1 = dxhat.iter().copied().sum::<T>() / nf;
                            let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                            for j in 0..n {
                                gx[base + j * inner] += r * (dxhat[j] - m1 - xhat[j] * m2);
                            }
                        }
                    }
                }
                if let (Some(acc), Some(gx)) = (gx_acc, slot!(x)) {
                    gx.iter_mut().zip(&acc).for_each(|(d, &s)| *d += s);
                }
                if let Some(gg) = slot!(gain) {
                    gg.iter_mut().zip(&dgain).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = slot!(bias) {
                    gb.iter_mut().zip(&dbias).for_each(|(d, &s)| *d += s);
                }
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                if let Some(gx) = slot!(x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let norm = norms[o * inner + i];
                            if norm > *eps {
                                let dot: T = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                                for j in 0..n {
                                    let p = base + j * inner;
                                    gx[p] += (g[p] - y[p] * dot) / norm;
                                }
                            } else {
                                for j in 0..n {
                                    let p = base + j * inner;
                                    gx[p] += g[p] / *eps;
                                }
                            }
                        }
                    }
                }
            }
            Op::Unary { x, kind } => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot!(x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * unary_derivative(*kind, v);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                let scale = g[0] / T::lit(nodes[x.0].value.len() as f64);
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().for_each(|d| *d += scale);
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(&nodes[x.0].shape, *axis);
                if let Some(gx) = slot!(x) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } => {
                if let Some(gx) = slot!(x) {
                    argmax.iter().zip(g).for_each(|(&j, &s)| gx[j] += s);
                }
            }
            Op::Conv3x3 { input, kernel, bias } => {
                let si = &nodes[input.0].shape;
                let (cin, h, w) = (si[0], si[1], si[2]);
                let cout = nodes[kernel.0].shape[0];
                let hw = h * w;
                if let Some(gb) = slot!(bias) {
                    for co in 0..cout {
                        gb[co] += g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                let need_k = nodes[kernel.0].requires_grad;
                let need_x = nodes[input.0].requires_grad;
                if need_k {
                    let cols = im2col3(&nodes[input.0].value, cin, h, w);
                    let gk = slot!(kernel).expect("kernel requires grad");
                    // dK = dOut @ cols^T
                    T::gemm(cout, hw, cin * 9, g, hw as isize, 1, &cols, 1, hw as isize, T::one(), gk, (cin * 9) as isize, 1);
                }
                if need_x {
                    let kv = &nodes[kernel.0].value;
                    let mut dcols = vec![T::zero(); cin * 9 * hw];
                    // dCols = K^T @ dOut
                    T::gemm(cin * 9, cout, hw, kv, 1, (cin * 9) as isize, g, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                    let gx = slot!(input).expect("input requires grad");
                    col2im3(&dcols, cin, h, w, gx);
                }
            }
            Op::Sparse { x, matrix } => {
                let outer = g.len() / matrix.n_out;
                if let Some(gx) = slot!(x) {
                    for o in 0..outer {
                        for (r, row) in matrix.rows.iter().enumerate() {
                            let s = g[o * matrix.n_out + r];
                            for &(j, wgt) in row {
                                gx[o * matrix.n_in + j] += s * T::lit(wgt);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn conv_forward(&self, input: DiffTensor, kernel: DiffTensor, bias: DiffTensor) -> Vec<T> {
        let si = &self.nodes[input.0].shape;
        let (cin, h, w) = (si[0], si[1], si[2]);
        let cout = self.nodes[kernel.0].shape[0];
        let hw = h * w;
        let cols = im2col3(&self.nodes[input.0].value, cin, h, w);
        let mut out = vec![T::zero(); cout * hw];
        let bv = &self.nodes[bias.0].value;
        for co in 0..cout {
            out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = bv[co]);
        }
        T::gemm(cout, cin * 9, hw, &self.nodes[kernel.0].value, (cin * 9) as isize, 1, &cols, hw as isize, 1, T::one(), &mut out, hw as isize, 1);
        out
    }

    pub(crate) fn matmul_forward(&self, a: DiffTensor, b: DiffTensor, batch_a: usize, batch_b: usize, m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); batch_a.max(batch_b) * m * n];
        batched_matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, batch_a, batch_b, m, k, n);
        out
    }
}

pub(crate) fn unary_forward<T: Element>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Gelu => {
            let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let u = c * (x + T::lit(0.044715) * x * x * x);
            T::lit(0.5) * x * (T::one() + u.tanh())
        }
        UnaryKind::Silu => x / (T::one() + (-x).exp()),
        UnaryKind::Abs => x.abs(),
    }
}

fn unary_derivative<T: Element>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Gelu => {
            let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let a = T::lit(0.044715);
            let t = (c * (x + a * x * x * x)).tanh();
            let half = T::lit(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
        }
        UnaryKind::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
    }
}
