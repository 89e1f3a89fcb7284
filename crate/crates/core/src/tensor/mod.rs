//! Dense tensors, the differentiation tape, and the binary tensor format.

pub mod io;
mod tape;
mod value;

pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;

pub(crate) use tape::{log_softmax_raw, matmul_raw, softmax_raw};
