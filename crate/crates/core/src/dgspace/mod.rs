//! Broken polynomial spaces: bases, quadrature, fields and face operators.

pub mod basis;
pub mod field;
pub mod quadrature;
pub mod space;

pub use field::{average, harmonic_average, jump, DgField, FaceTraces};
pub use space::{CellMap, DgSpace, FaceQuad, FaceSide, VolumeRule};

/// Local trace constant `C_K = p (p + d - 1) / d`.
pub fn trace_constant(p: usize, dim: usize) -> f64 {
    (p * (p + dim - 1)) as f64 / dim as f64
}

/// Penalty base `eta_e = max_{p in {p-, p+}} max{p (p + d - 1), 1}`.
pub fn penalty_base(p_minus: usize, p_plus: usize, dim: usize) -> f64 {
    let local = |p: usize| ((p * (p + dim - 1)) as f64).max(1.0);
    local(p_minus).max(local(p_plus))
}
