//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`DiffTensor`] handles.
//! Calling [`Tape::backward`] on a scalar walks the record in reverse and
//! accumulates gradients into every leaf created with [`Tape::leaf`].
//! The tape is generic over the element width so the same graph code runs in
//! 64-bit (gradient checks, training) or 32-bit (fast inference).

mod element;
pub mod gradcheck;
mod kernels;
mod ops;
mod rng;
mod tape;

pub use element::Element;
pub use ops::reflect_index;
pub use rng::Rng;
pub use tape::{DiffTensor, SparseMatrix, Tape};

/// Splits `shape` around `axis` into `(outer, len, inner)` element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
