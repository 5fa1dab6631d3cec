//! Dense tensors, reverse-mode autodiff, Adam, and the complex matrix algebra
//! used by the classical solvers.

mod adam;
mod complex;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use complex::{ComplexMatrix, C64, MAX_CONDITION};
pub use tape::{Axis, Gradients, Tape, Var, UNIT_MODULUS_EPS};
pub use tensor::{matmul, RealTensor};

#[allow(unused_imports)]
pub(crate) use tensor::gemm;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty operand")]
    Empty { op: &'static str },
    #[error("{op}: range {start}..{end} out of bounds for length {len}")]
    SliceBounds {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{op}: input outside the function domain")]
    Domain { op: &'static str },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("{op}: row {row} is all zeros")]
    ZeroRow { op: &'static str, row: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter {index}")]
    NanGradient { index: usize },
    #[error("invalid optimizer setting: {0}")]
    Hyperparameter(String),
    #[error("matrix is singular or ill-conditioned (condition estimate {estimate:e})")]
    IllConditioned { estimate: f64 },
}
