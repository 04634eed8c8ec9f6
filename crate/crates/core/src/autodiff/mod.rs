//! Dense tensors, a reverse-mode tape and an SGD optimizer.

mod sgd;
mod tape;
mod tensor;

pub use sgd::Sgd;
pub use tape::{Axis, BackwardRule, Gradients, Tape, Var};
pub use tensor::Tensor;
