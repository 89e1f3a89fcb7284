//! Semantic and spatial adaptive prototype classification for segmentation,
//! with online multi-domain distillation, on a small reverse-mode autodiff
//! tensor core.
//!
//! Everything numeric is generic over [`Scalar`]; the `*64` aliases are the
//! default instantiation used by the training harness and the CLI.

pub mod bundle;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod head;
pub mod mask;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use bundle::{Bundle, BUNDLE_MAGIC};
pub use error::{Error, Result};
pub use mask::LabelMask;
pub use param::Parameters;
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = harness::Model<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Bundle64 = Bundle<f64>;
