//! Small reverse-mode automatic differentiation kernel.
//!
//! A [`Tape`] records the exact set of primitives the pipeline needs (affine
//! maps, softmax, sigmoid, tanh, binary cross-entropy, pooling, gathers and a
//! handful of elementwise ops). Values are `f64` throughout. A fresh tape is
//! built per batch and swept once by [`Tape::backward`].
//!
//! ```
//! use mixsp::diffkit::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&Tensor::scalar(3.0));
//! let loss = tape.square(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_tensors};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{bce_value, sigmoid_value, softmax_values, Gradients, Tape, Var, LOG_EPS};
pub use tensor::Tensor;
