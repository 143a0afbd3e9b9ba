//! Dense tensors and reverse-mode differentiation over the operation set the
//! classifier needs.

mod conv;
mod gradcheck;
mod graph;
mod norm;
mod real;
mod tensor;

pub use conv::{conv_out_extent, ConvSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Activation, Graph, Mode, ReduceKind, Var};
pub use norm::{BatchStats, BN_MOMENTUM, NORM_EPS};
pub use real::Real;
pub use tensor::Tensor;
