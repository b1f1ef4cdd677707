//! Sparse storage and linear solvers.

pub mod blocklu;
pub mod dense;
pub mod iterative;
pub mod sparse;
pub mod tensor;

pub use blocklu::{nested_dissection, BlockLu};
pub use iterative::{bicgstab, gmres, Identity, Ilu0, KrylovStats, LinearOperator, Preconditioner};
pub use sparse::BlockCsr;
pub use tensor::TensorDiagonalizer;
