//! Dense arrays, reverse-mode differentiation and Adam.

mod adam;
mod array;
mod autodiff;
pub mod kernels;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState, ParamSet};
pub use array::NdArray;
pub use autodiff::{grad, vjp, Tape, Var};
pub use ops::{Eager, Ops};
