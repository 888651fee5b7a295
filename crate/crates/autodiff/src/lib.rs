//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records eagerly evaluated operations. Gradients are computed
//! by replaying the tape backwards with ordinary tape operations, which makes
//! second-order quantities such as Hessian-vector products available without
//! assembling a Hessian:
//!
//! ```
//! use ilearn_autodiff::{hvp, Tensor};
//!
//! // f(x) = 0.5 * x^T diag(1, 2) x
//! let f = |t: &mut ilearn_autodiff::Tape, x| {
//!     let w = t.constant(Tensor::vector(vec![1.0, 2.0]));
//!     let xx = t.square(x);
//!     let wx = t.mul(w, xx)?;
//!     let s = t.sum(wx);
//!     Ok(t.scale(s, 0.5))
//! };
//! let hv = hvp(f, &Tensor::vector(vec![1.0, 1.0]), &Tensor::vector(vec![1.0, 1.0])).unwrap();
//! assert_eq!(hv.data(), &[1.0, 2.0]);
//! ```
//!
//! Derivatives are supported up to second order.

pub mod error;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{AdError, Result};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, ParamStore, Parameter};
pub use tape::{grad, hvp, Tape, Var};
pub use tensor::Tensor;
