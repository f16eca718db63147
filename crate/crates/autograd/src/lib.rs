//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Tape`] evaluates operations eagerly and records how to propagate
//! gradients back to its inputs. Parameters live in a [`ParamStore`] and are
//! copied onto a fresh tape for every step.

mod alloc;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use param::{Param, ParamId, ParamStore};
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{BackwardArgs, BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
