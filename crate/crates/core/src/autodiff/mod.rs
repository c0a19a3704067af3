//! Reverse-mode automatic differentiation over small dense tensors, plus
//! SGD/Adam.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_all_ops, check_op, finite_difference_gradient, GradCheck};
pub use optim::{Optimizer, OptimizerKind, ParamSet};
pub use tape::{log_sum_exp, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
