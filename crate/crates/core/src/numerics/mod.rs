//! Dense arrays, reverse-mode differentiation and a finite-difference oracle.

mod array;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod params;
mod tape;

pub use array::{broadcast_shape, NDArray};
pub use gradcheck::{grad_check, grad_check_inputs, GradCheckReport};
pub use nn::ForwardCtx;
pub use ops::{concat, stack, Csr};
pub use params::{InitSpec, ParamId, ParamStore, Parameter};
pub use tape::{set_matmul_backward_fault, BackwardCtx, BackwardFn, Gradients, Tape, Var};
