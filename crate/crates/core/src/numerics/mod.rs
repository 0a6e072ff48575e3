//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, check_gradient_with, relative_error, GradCheckReport};
pub use real::Real;
pub use tape::{cosine, softmax, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use real::{gemm, MatView};
