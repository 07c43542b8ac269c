//! Reverse-mode automatic differentiation over small dense arrays.
//!
//! Computation is recorded eagerly on a [`Tape`]: every operation evaluates
//! immediately and appends a node holding its output and the ids of its
//! inputs. [`Tape::backward`] then walks the nodes in reverse order and
//! accumulates vector-Jacobian products into every node that requires a
//! gradient.
//!
//! ```
//! use coevo_autodiff::{Array, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Array::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).item(), 9.0);
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

mod array;
mod check;
mod error;
pub mod kernels;
mod tape;

pub use array::Array;
pub use check::{evaluate, grad_check, value_and_grad, Bindings, Graph, NamedArrays};
pub use error::{AutodiffError, Result};
pub use tape::{Gradients, Tape, Var};
