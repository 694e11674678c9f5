//! Mini single-stage grid detector built on a small reverse-mode autodiff
//! engine, with detection-oriented saliency maps.

pub mod assign;
pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
mod kernels;
pub mod loss;
pub mod model;
pub mod postprocess;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod train;

pub use boxes::{AnchorPrior, AnchorSet, BBox, CellAddress, Pathway};
pub use error::{Error, Result};
pub use model::{ForwardOutput, ModelConfig, ModelState, PathwayOutput};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
