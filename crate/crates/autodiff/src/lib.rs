//! A small reverse-mode automatic differentiation engine over dense fp64
//! tensors.
//!
//! Values are recorded on a [`Tape`] during the forward pass. Parameters live
//! outside the tape in a [`ParameterSet`]; each training step binds them onto
//! a fresh tape, runs the forward pass, calls [`Tape::backward`] and copies
//! the accumulated leaf gradients back with
//! [`ParameterSet::accumulate_grads`].
//!
//! ```
//! use tsrl_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq, None).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Bindings, ParameterSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
