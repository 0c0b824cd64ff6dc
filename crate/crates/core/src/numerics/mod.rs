//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Everything runs in f64. The forward pass records primitive applications
//! on a [`Tape`]; [`Tape::backward`] replays them in reverse to accumulate
//! vector-Jacobian products. Finite differences live in [`autodiff`] and are
//! used as a test oracle only, never in training.

mod autodiff;
mod linalg;
mod tape;
mod tensor;

pub use autodiff::{
    finite_difference_gradient, max_relative_error, value_and_grad, GradFn, ParamBindings, Params,
};
pub use linalg::{matmul, transpose};
pub use tape::{BufId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NotFinite { index: usize },
    #[error("gradient target must be a scalar, got {numel} elements")]
    NonScalarOutput { numel: usize },
    #[error("unsupported primitive: {0}")]
    UnsupportedPrimitive(String),
    #[error("conv1d kernel length must be odd, got {0}")]
    EvenKernel(usize),
    #[error("unknown parameter name: {0}")]
    UnknownParam(String),
    #[error("{0}")]
    External(String),
}

/// The closed set of differentiable primitives the tape understands.
///
/// Kept enumerable by name so test harnesses can sweep every primitive and
/// so misspelled names surface as [`NumericsError::UnsupportedPrimitive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Matmul,
    Transpose,
    Conv1dDilated,
    Add,
    AddBias,
    Mul,
    Affine,
    Relu,
    Clamp,
    SoftmaxRows,
    Log,
    Exp,
    Sigmoid,
    Sum,
    Mean,
    RowMean,
    L2NormalizeRows,
    LayerNormRows,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    Dot,
}

impl Primitive {
    pub const ALL: [Primitive; 23] = [
        Primitive::Matmul,
        Primitive::Transpose,
        Primitive::Conv1dDilated,
        Primitive::Add,
        Primitive::AddBias,
        Primitive::Mul,
        Primitive::Affine,
        Primitive::Relu,
        Primitive::Clamp,
        Primitive::SoftmaxRows,
        Primitive::Log,
        Primitive::Exp,
        Primitive::Sigmoid,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::RowMean,
        Primitive::L2NormalizeRows,
        Primitive::LayerNormRows,
        Primitive::ConcatRows,
        Primitive::SliceRows,
        Primitive::ConcatCols,
        Primitive::SliceCols,
        Primitive::Dot,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Conv1dDilated => "conv1d-dilated",
            Primitive::Add => "add",
            Primitive::AddBias => "add-bias",
            Primitive::Mul => "mul",
            Primitive::Affine => "affine",
            Primitive::Relu => "max-with-zero",
            Primitive::Clamp => "clamp",
            Primitive::SoftmaxRows => "softmax",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::RowMean => "row-mean",
            Primitive::L2NormalizeRows => "l2-normalize",
            Primitive::LayerNormRows => "layer-norm",
            Primitive::ConcatRows => "concatenate",
            Primitive::SliceRows => "slice",
            Primitive::ConcatCols => "concatenate-cols",
            Primitive::SliceCols => "slice-cols",
            Primitive::Dot => "dot",
        }
    }

    pub fn from_name(name: &str) -> Result<Primitive, NumericsError> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == name)
            .ok_or_else(|| NumericsError::UnsupportedPrimitive(name.to_string()))
    }
}
