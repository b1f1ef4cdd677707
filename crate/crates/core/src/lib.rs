//! Interior-penalty discontinuous Galerkin solver for the Cahn-Hilliard
//! equation with degenerate mobility.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`]: quadtree/octree meshes with hanging faces,
//! * [`dgspace`]: orthonormal Legendre bases, quadrature and DG fields,
//! * [`forms`]: the mobility, Laplacian and advection forms,
//! * [`linalg`]: sparse storage and the linear solvers,
//! * [`solver`]: the implicit time step, nonlinear iteration and limiter,
//! * [`adaptivity`]: hp marking and solution transfer,
//! * [`diagnostics`]: mass, energy, error norms and inequality checks.

pub mod adaptivity;
pub mod dgspace;
pub mod diagnostics;
pub mod error;
pub mod forms;
pub mod linalg;
pub mod mesh;
pub mod problems;
pub mod solver;

pub use error::{Error, Result};
