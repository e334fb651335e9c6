//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for each forward pass. Values enter it either as
//! plain leaves ([`Tape::leaf`]) or as trainable parameters drawn from a
//! [`ParamStore`] ([`Tape::param`]); operations append nodes in topological
//! order and [`Tape::backward`] sweeps them in reverse.
//!
//! Only scalar–tensor and equal-shape elementwise combinations are supported.
//! Anything else goes through an explicit op such as [`Tape::tile_rows`] or
//! [`Tape::row_scale`] so every backward rule stays small.
//!
//! ```
//! use relgat::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_point, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{ParamId, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} has every entry masked out")]
    DegenerateSoftmax { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}
