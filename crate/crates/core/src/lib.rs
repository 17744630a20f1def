//! Capsule networks with dynamic routing-by-agreement.
//!
//! - [`tensor`]: dense tensors and a define-by-run reverse-mode graph
//! - [`capsule`]: squash, prediction vectors, routing softmax and the routing loop
//! - [`model`]: the three-layer CapsNet, margin loss and reconstruction decoder
//! - [`data`]: MNIST IDX loading, shift/translate/affine augmentation, MultiMNIST
//! - [`train`]: Adam with exponential decay, the batch loop, checkpoints
//! - [`eval`]: metrics and diagnostics (dimension perturbation, routing
//!   convergence, overlap segmentation)

pub mod capsule;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CapsError, Result};
pub use model::{CapsNet, CapsNetConfig, ForwardResult, LossBreakdown};
pub use tensor::{Graph, Real, Tensor, Var};
