//! Small dense-tensor toolkit: define-by-run reverse-mode differentiation,
//! an AdamW optimizer, binary parameter checkpoints and finite-difference
//! gradient checking.
//!
//! ```
//! use sega_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::eval();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod adamw;
pub mod checkpoint;
mod error;
mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::Checkpoint;
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, op_gradient_suite, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Negative slope used for every leaky-ReLU in the model.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;
