//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values live on a [`Tape`]. [`Tape::grad`] records its backward sweep on
//! the same tape, so a gradient is an ordinary [`Var`] that can be fed into
//! further computation and differentiated again. Both gradient penalties in
//! the training objective depend on this.
//!
//! ```
//! use bayescal::diff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = x.mul(x)?.mul(x)?;                  // x^3
//! let dy = tape.grad(y, &[x])?.get(0);        // 3x^2
//! let d2y = tape.grad(dy, &[x])?.get(0);      // 6x
//! assert_eq!((dy.item(), d2y.item()), (12.0, 12.0));
//! # Ok::<(), bayescal::Error>(())
//! ```

mod backward;
mod check;
mod ops;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use check::{grad_check, grad_check_extrapolated, grad_check_report, rel_error, GradCheck, ABS_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

pub(crate) use tape::softplus as softplus_f64;
