//! Compositional attention (disentangled search and retrieval) next to
//! standard multi-head attention, built on a small reverse-mode autodiff
//! tensor library, with the contextual retrieval task, a training loop and
//! post-hoc analyses.

// Index loops mirror the matrix notation; `!(x > y)` deliberately treats
// NaN as failing the comparison.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod error;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{no_grad, Mask, ParamStore, Tensor};
