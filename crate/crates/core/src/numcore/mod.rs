//! Dense tensor arithmetic, symmetric/generalized eigendecomposition, and a
//! minimal reverse-mode differentiation engine.

pub mod eig;
pub mod tape;
pub mod tensor;

pub use eig::{generalized_eig_spd, sym_eig, whitening_transform, GenEig, SymEig};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::{DType, Tensor};
