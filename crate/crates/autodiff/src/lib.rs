//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a one-element node returns exact gradients for the
//! trainable leaves; [`Graph::grad_as_node`] instead returns the gradient as a
//! new node of the same graph, so expressions that contain gradients (such as
//! a gradient-norm penalty) can themselves be differentiated.
//!
//! ```
//! use ehr_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
mod graph;
mod scalar;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{GradientMap, Graph, Var, LN_FLOOR};
pub use scalar::Real;
pub use tensor::{broadcast_shape, Tensor};
