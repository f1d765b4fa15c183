//! Minimal dense-tensor library with tape-based reverse-mode differentiation.
//!
//! Everything is `f64`. A [`Tape`] records each operation as it is evaluated;
//! [`Tape::backward`] then sweeps the tape once in reverse. Parameters live in
//! a [`ParamStore`] and are placed on a tape per step with
//! [`ParamStore::bind`].

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Activation, CustomBackward, Gradients, Tape, Var, DICE_EPS};
pub use tensor::Tensor;
