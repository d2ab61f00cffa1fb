//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! All values are 2-D `f64` matrices. Model code builds a forward pass on a
//! [`Graph`] bound to a [`ParamStore`], calls [`Graph::backward`] on a scalar
//! loss, and folds the returned [`Gradients`] into the store. Reductions run
//! left to right in a fixed order, so forward and backward passes are
//! bitwise reproducible.

mod check;
mod checkpoint;
mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{grad_check, grad_check_params, relative_error, ParamCheck, REL_ERROR_FLOOR};
pub use checkpoint::{read_named_tensors, write_named_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{AutodiffError, Result};
pub use graph::{Axis, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

/// Epsilon used by every layer-norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
