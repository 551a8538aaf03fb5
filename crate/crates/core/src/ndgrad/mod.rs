//! Dense `f64` tensors with reverse-mode differentiation, limited to the node
//! kinds the codec, guidance, and discriminator networks need.
//!
//! A [`Graph`] is built eagerly: every node is evaluated when it is pushed.
//! Inputs can later be rebound with [`Graph::forward`], which re-evaluates the
//! whole graph; that is what [`finite_diff_check`] relies on.

mod check;
mod graph;
pub mod layers;
mod ops;
mod tensor;

pub use check::{
    finite_diff_check, finite_diff_check_with, Coverage, FdOptions, GradCheckReport, InputCheck, Stencil, REL_ERROR_FLOOR,
};
pub use graph::{Graph, GraphError, NodeId, COSINE_EPS};
pub use ops::{Conv1dSpec, Conv2dSpec, ConvTranspose1dSpec};
pub use tensor::Tensor;

pub(crate) use ops::{dft_frames, DftTables};
