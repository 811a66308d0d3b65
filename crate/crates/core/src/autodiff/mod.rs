//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations as they are evaluated. Calling
//! [`Tape::backward`] on a scalar sweeps the record in reverse and returns
//! gradients for every leaf that the scalar depends on. [`Tape::detach`]
//! yields a value-identical barrier node; nothing upstream of it receives
//! gradient through it, which is how truncated unrolls are cut.
//!
//! ```
//! use remembra::autodiff::Tape;
//! use remembra::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
//! let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
//! let y = tape.matmul(w, x).unwrap();
//! let loss = tape.mean_all(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
//! ```

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{finite_difference_gradients, max_relative_error};
pub use kernels::huber;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::tensor::Tensor;

/// `scale * mean(huber(a - b, delta))` evaluated without a tape.
pub fn huber_loss(a: &Tensor, b: &Tensor, delta: f64, scale: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = tape.huber(va, vb, delta, scale)?;
    Ok(tape.value(l).item())
}
