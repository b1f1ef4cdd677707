//! Mass, energy, error norms, convergence orders and numerical checks of
//! the coercivity and trace inequalities.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dgspace::basis::Tabulation;
use crate::dgspace::quadrature::{tensor_rule, GaussRule};
use crate::dgspace::space::tabulate_physical;
use crate::dgspace::{trace_constant, DgField, DgSpace};
use crate::error::{Error, Result};
use crate::forms::{apply_a, apply_b, apply_c, double_well, FormAssembler, PhysicalParams, SchemeVariant, VelocityField};
use crate::linalg::BlockCsr;
use crate::mesh::{AdaptLimits, AdaptiveMesh, BoxDomain, CellAction, Point};
use crate::solver::{field_bounds, zhang_shu_limit, ChState, StepReport};

/// Weights of the discrete energy.
#[derive(Clone)]
pub struct EnergyParams {
    /// `1 / (We Cn)`.
    pub interface_prefactor: f64,
    pub rho1: f64,
    pub rho2: f64,
    /// Kinetic term `int rho(phi) |u|^2 / 2`, omitted when `None`.
    pub velocity: Option<VelocityField>,
}

impl EnergyParams {
    /// Stand-alone Cahn-Hilliard: prefactor 1, no kinetic term.
    pub fn standalone() -> Self {
        Self {
            interface_prefactor: 1.0,
            rho1: 1.0,
            rho2: 1.0,
            velocity: None,
        }
    }

    pub fn with_weber(we: f64, cn: f64, rho1: f64, rho2: f64, velocity: Option<VelocityField>) -> Result<Self> {
        if !(we > 0.0 && cn > 0.0) {
            return Err(Error::InvalidInput(format!("need We > 0 and Cn > 0, got {we} and {cn}")));
        }
        Ok(Self {
            interface_prefactor: 1.0 / (we * cn),
            rho1,
            rho2,
            velocity,
        })
    }

    pub fn density(&self, phi: f64) -> f64 {
        0.5 * (1.0 + phi) * self.rho1 + 0.5 * (1.0 - phi) * self.rho2
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self::standalone()
    }
}

impl fmt::Debug for EnergyParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnergyParams")
            .field("interface_prefactor", &self.interface_prefactor)
            .field("rho1", &self.rho1)
            .field("rho2", &self.rho2)
            .field("velocity", &self.velocity.is_some())
            .finish()
    }
}

/// `(1 / |T_h|) int phi`.
pub fn mass(phi: &DgField) -> f64 {
    phi.integral() / phi.space().mesh().total_volume()
}

/// Discrete energy with the Laplacian assembled on the fly.
pub fn energy(phi: &DgField, energy: &EnergyParams, params: &PhysicalParams, time: f64) -> f64 {
    let a = FormAssembler::new(phi.space()).laplacian(params);
    energy_with_laplacian(phi, &a, energy, params, time)
}

/// `pref [int W(phi) + Cn^2/2 a(phi, phi)] + int rho(phi) |u|^2 / 2`.
pub fn energy_with_laplacian(
    phi: &DgField,
    laplacian: &BlockCsr,
    energy: &EnergyParams,
    params: &PhysicalParams,
    time: f64,
) -> f64 {
    let space = phi.space();
    let mut bulk = 0.0;
    let mut kinetic = 0.0;
    for c in 0..space.num_cells() {
        let rule = space.cell_rule(c);
        let jac = space.cell_map(c).jacobian;
        let values = phi.volume_values(c);
        let points = energy.velocity.as_ref().map(|_| space.volume_points(c));
        for (q, v) in values.iter().enumerate() {
            let w = rule.weights[q] * jac;
            bulk += w * double_well(*v);
            if let (Some(u), Some(pts)) = (&energy.velocity, &points) {
                let uq = u(&pts[q], time);
                let u2: f64 = uq.iter().map(|x| x * x).sum();
                kinetic += w * 0.5 * energy.density(*v) * u2;
            }
        }
    }
    let gradient = 0.5 * params.cn * params.cn * laplacian.bilinear(phi.coeffs(), phi.coeffs());
    energy.interface_prefactor * (bulk + gradient) + kinetic
}

/// One row of the per-step time series.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub mass: f64,
    pub energy: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub cells: usize,
    pub dofs: usize,
    pub nonlinear_iterations: usize,
    pub linear_iterations: usize,
    pub residual: f64,
    pub adapted: bool,
}

pub fn record_state(
    state: &ChState,
    laplacian: &BlockCsr,
    params: &PhysicalParams,
    energy: &EnergyParams,
    report: StepReport,
    adapted: bool,
) -> StepRecord {
    let (phi_min, phi_max) = field_bounds(&state.phi);
    let space = state.phi.space();
    StepRecord {
        step: state.step,
        time: state.time,
        mass: mass(&state.phi),
        energy: energy_with_laplacian(&state.phi, laplacian, energy, params, state.time),
        phi_min,
        phi_max,
        cells: space.num_cells(),
        dofs: space.ndofs(),
        nonlinear_iterations: report.nonlinear_iterations,
        linear_iterations: report.linear_iterations,
        residual: report.residual,
        adapted,
    }
}

/// Time series and metadata of one run.
#[derive(Clone, Debug, Serialize)]
pub struct RunDiagnostics {
    pub variant: String,
    pub params: PhysicalParams,
    pub mesh: String,
    pub records: Vec<StepRecord>,
}

/// Allowed slack for the structure checks.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StructureTolerances {
    /// Bound on `|m(t_n) - m(0)|` over the run.
    pub mass: f64,
    /// Bound on `E(t_n) - E(t_{n-1})`.
    pub energy: f64,
    /// Bound on `|phi| - 1` at check points.
    pub bounds: f64,
}

impl StructureTolerances {
    /// Mass within `(T / tau) eps`, energy within `C_E eps` per step.
    pub fn for_run(steps: usize, nonlinear_tol: f64) -> Self {
        Self {
            mass: steps.max(1) as f64 * nonlinear_tol,
            energy: ENERGY_SLACK * nonlinear_tol,
            bounds: 1e-12,
        }
    }
}

/// Per-step energy slack in units of the nonlinear tolerance.
pub const ENERGY_SLACK: f64 = 10.0;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StructureChecks {
    pub max_mass_drift: f64,
    pub max_energy_increase: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub mass_ok: bool,
    pub energy_ok: bool,
    pub bounds_ok: bool,
}

impl StructureChecks {
    pub fn all_ok(&self) -> bool {
        self.mass_ok && self.energy_ok && self.bounds_ok
    }
}

impl RunDiagnostics {
    pub fn new(variant: SchemeVariant, params: PhysicalParams, mesh: String) -> Self {
        Self {
            variant: variant.name().to_string(),
            params,
            mesh,
            records: Vec::new(),
        }
    }

    pub fn max_mass_drift(&self) -> f64 {
        let Some(first) = self.records.first() else {
            return 0.0;
        };
        self.records.iter().map(|r| (r.mass - first.mass).abs()).fold(0.0, f64::max)
    }

    /// Largest single-step energy increase; negative if energy always decreased.
    pub fn max_energy_increase(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| w[1].energy - w[0].energy)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.phi_min), hi.max(r.phi_max))
        })
    }

    pub fn check(&self, tol: &StructureTolerances) -> StructureChecks {
        let drift = self.max_mass_drift();
        let rise = self.max_energy_increase();
        let (lo, hi) = self.bounds();
        StructureChecks {
            max_mass_drift: drift,
            max_energy_increase: rise,
            phi_min: lo,
            phi_max: hi,
            mass_ok: drift <= tol.mass,
            energy_ok: rise <= tol.energy,
            bounds_ok: lo >= -1.0 - tol.bounds && hi <= 1.0 + tol.bounds,
        }
    }
}

/// `(||phi_h - phi||_{L2}, ||grad(phi_h - phi)||_{L2})` with a per-cell
/// Gauss rule of `2p + 3` points per axis.
pub fn error_norms(phi: &DgField, exact: &dyn Fn(&Point) -> (f64, Point)) -> (f64, f64) {
    let space = phi.space();
    let dim = space.dim();
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for c in 0..space.num_cells() {
        let p = space.order(c);
        let rule = GaussRule::new(2 * p + 3);
        let (refs, weights) = tensor_rule(&rule, dim);
        let map = space.cell_map(c);
        let points: Vec<Point> = refs.iter().map(|r| map.to_physical(r, dim)).collect();
        let (n, vals, grads) = tabulate_physical(space.mesh().cell(c), map, dim, &points);
        let coeffs = phi.cell_coeffs(c);
        for (q, x) in points.iter().enumerate() {
            let (u, du) = exact(x);
            let w = weights[q] * map.jacobian;
            let mut v = 0.0;
            let mut g = [0.0; 3];
            for i in 0..n {
                v += coeffs[i] * vals[q * n + i];
                for (k, gk) in g.iter_mut().enumerate().take(dim) {
                    *gk += coeffs[i] * grads[(q * n + i) * dim + k];
                }
            }
            l2 += w * (v - u).powi(2);
            h1 += w * (0..dim).map(|k| (g[k] - du[k]).powi(2)).sum::<f64>();
        }
    }
    (l2.sqrt(), h1.sqrt())
}

/// `log2(e_{k-1} / e_k)` for successive doublings of `N`.
pub fn eoc(errors: &[f64], n_values: &[usize]) -> Result<Vec<f64>> {
    if errors.len() != n_values.len() {
        return Err(Error::InvalidInput(format!(
            "{} errors for {} resolutions",
            errors.len(),
            n_values.len()
        )));
    }
    for w in n_values.windows(2) {
        if w[1] != 2 * w[0] {
            return Err(Error::InvalidInput(format!("resolutions must double, got {} then {}", w[0], w[1])));
        }
    }
    Ok(errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}

/// Limit of the dense eigenvalue checks.
pub const DENSE_LIMIT: usize = 1000;

#[derive(Clone, Debug, Serialize)]
pub struct CoercivityReport {
    pub variant: String,
    pub dofs: usize,
    pub penalty_scale: f64,
    /// Smallest generalized eigenvalue in each trial.
    pub trial_eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub coercive: bool,
}

/// Smallest `lambda` of `B x = lambda G x` on the complement of the global
/// constants, with `B` the symmetrized mobility matrix at `phi` and `G` the
/// Gram matrix of its semi-norm, both with penalties scaled by `penalty_scale`.
pub fn coercivity_eigenvalue(variant: SchemeVariant, params: &PhysicalParams, phi: &DgField, penalty_scale: f64) -> Result<f64> {
    let space = phi.space();
    let n = space.ndofs();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge {
            size: n,
            limit: DENSE_LIMIT,
        });
    }
    let (lo, hi) = field_bounds(phi);
    if lo < -1.0 + 1e-6 || hi > 1.0 - 1e-6 {
        return Err(Error::InvalidInput(format!(
            "coercivity check needs |phi| <= 1 - 1e-6, got range [{lo}, {hi}]"
        )));
    }
    let forms = FormAssembler::new(space);
    let b = forms.mobility_scaled(variant, params, phi, penalty_scale)?.to_dense();
    let b = (&b + b.transpose()) * 0.5;
    let g = forms.mobility_seminorm_scaled(variant, params, phi, penalty_scale).to_dense();
    let g = (&g + g.transpose()) * 0.5;
    let q = constant_complement(space);
    let bq = q.transpose() * b * &q;
    let gq = q.transpose() * g * &q;
    let min = min_generalized_eigenvalue(&bq, &gq)?;
    Ok(min)
}

/// Runs [`coercivity_eigenvalue`] on `trials` random fields bounded by
/// `amplitude` at the limiter check points.
pub fn coercivity_verify(
    variant: SchemeVariant,
    params: &PhysicalParams,
    space: &Arc<DgSpace>,
    trials: usize,
    amplitude: f64,
    penalty_scale: f64,
    seed: u64,
) -> Result<CoercivityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eigs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let phi = random_bounded_field(space, &mut rng, amplitude)?;
        eigs.push(coercivity_eigenvalue(variant, params, &phi, penalty_scale)?);
    }
    let min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CoercivityReport {
        variant: variant.name().to_string(),
        dofs: space.ndofs(),
        penalty_scale,
        trial_eigenvalues: eigs,
        min_eigenvalue: min,
        coercive: min > 0.0,
    })
}

/// Random coefficients rescaled so the check-point values stay within
/// `amplitude`, with high contrast between neighbouring cells.
pub fn random_bounded_field(space: &Arc<DgSpace>, rng: &mut ChaCha8Rng, amplitude: f64) -> Result<DgField> {
    let coeffs: Vec<f64> = (0..space.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phi = DgField::from_coeffs(space, coeffs)?;
    let (lo, hi) = field_bounds(&phi);
    let s = amplitude / lo.abs().max(hi.abs()).max(1e-300);
    let scaled: Vec<f64> = phi.coeffs().iter().map(|c| c * s).collect();
    DgField::from_coeffs(space, scaled)
}

/// Orthonormal basis of the coefficient vectors orthogonal to the constants.
fn constant_complement(space: &DgSpace) -> DMatrix<f64> {
    let n = space.ndofs();
    let mut v = DMatrix::zeros(n, 1);
    for c in 0..space.num_cells() {
        v[(space.offset(c), 0)] = space.mesh().cell(c).volume(space.dim()).sqrt();
    }
    let v = &v / v.norm();
    let projector = DMatrix::<f64>::identity(n, n) - &v * v.transpose();
    let eig = SymmetricEigen::new(projector);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    DMatrix::from_fn(n, cols.len(), |i, j| eig.eigenvectors[(i, cols[j])])
}

/// Smallest `lambda` with `B x = lambda G x`, `G` symmetric positive definite.
fn min_generalized_eigenvalue(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    if b.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(generalized_eigenvalues(b, g)?.into_iter().fold(f64::INFINITY, f64::min))
}

fn generalized_eigenvalues(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearSolveFailure("semi-norm Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::LinearSolveFailure("singular Cholesky factor".into()))?;
    let c = &linv * b * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Ok(SymmetricEigen::new(c).eigenvalues.iter().copied().collect())
}

/// `n x n` unit-square mesh with orders cycling through `0, 1, 2`.
pub fn mixed_order_space(n: usize) -> Result<Arc<DgSpace>> {
    let base = AdaptiveMesh::build_uniform(BoxDomain::unit(2), n, 2, 1)?;
    let orders: Vec<usize> = (0..base.num_cells()).map(|c| c % 3).collect();
    Ok(DgSpace::from_mesh(base.with_orders(&orders)))
}

/// Random orders in `0..=2` on a 4 x 4 mesh with one refined cell, so that
/// hanging faces and all order pairings occur.
pub fn hanging_face_space(seed: u64) -> Result<Arc<DgSpace>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = AdaptiveMesh::build_uniform(BoxDomain::unit(2), 4, 2, 1)?;
    let orders: Vec<usize> = (0..base.num_cells()).map(|_| rng.random_range(0..=2)).collect();
    let base = base.with_orders(&orders);
    let mut marks = vec![CellAction::KEEP; base.num_cells()];
    marks[5] = CellAction::REFINE_H;
    let limits = AdaptLimits {
        p_min: 0,
        p_max: 2,
        max_level: 2,
    };
    Ok(DgSpace::from_mesh(base.adapt(&marks, limits)?.mesh))
}

#[derive(Clone, Debug, Serialize)]
pub struct LimiterReport {
    pub samples: usize,
    /// Largest change of a cell mean.
    pub max_mean_change: f64,
    /// Largest coefficient change when limiting a limited field again.
    pub max_idempotence_change: f64,
    /// Largest `|phi| - 1` at check points after limiting.
    pub max_bound_excess: f64,
    pub passes: bool,
}

/// Tolerance on limiter mean changes and repeated application.
pub const LIMITER_TOL: f64 = 1e-14;

/// Limits `samples` random single-cell polynomials of order 1 to 3 in 2D and
/// 3D whose cell means lie in `[-1, 1]` but whose values leave it.
pub fn limiter_verify(samples: usize, seed: u64) -> Result<LimiterReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spaces = Vec::new();
    for dim in 2..=3 {
        for p in 1..=3 {
            spaces.push(DgSpace::from_mesh(AdaptiveMesh::build_uniform(BoxDomain::unit(dim), 1, dim, p)?));
        }
    }
    let mut report = LimiterReport {
        samples,
        max_mean_change: 0.0,
        max_idempotence_change: 0.0,
        max_bound_excess: f64::NEG_INFINITY,
        passes: false,
    };
    let mut done = 0;
    while done < samples {
        let space = &spaces[rng.random_range(0..spaces.len())];
        let mut coeffs: Vec<f64> = (0..space.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phi = DgField::from_coeffs(space, coeffs.clone())?;
        let mean = rng.random_range(-1.0..1.0);
        coeffs[0] = mean / phi.cell_mean(0) * coeffs[0];
        let phi = DgField::from_coeffs(space, coeffs)?;
        let (lo, hi) = field_bounds(&phi);
        if lo >= -1.0 && hi <= 1.0 {
            continue;
        }
        done += 1;
        let limited = zhang_shu_limit(&phi)?;
        report.max_mean_change = report.max_mean_change.max((limited.cell_mean(0) - phi.cell_mean(0)).abs());
        let again = zhang_shu_limit(&limited)?;
        let change = again
            .coeffs()
            .iter()
            .zip(limited.coeffs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        report.max_idempotence_change = report.max_idempotence_change.max(change);
        let (lo, hi) = field_bounds(&limited);
        report.max_bound_excess = report.max_bound_excess.max(-1.0 - lo).max(hi - 1.0);
    }
    report.passes = report.max_mean_change <= LIMITER_TOL
        && report.max_idempotence_change <= LIMITER_TOL
        && report.max_bound_excess <= 1e-12;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SymmetryReport {
    pub variant: String,
    pub trials: usize,
    /// `max |b(phi; v, w) - b(phi; w, v)| / (|b(phi; v, w)| + |b(phi; w, v)| + 1)`.
    pub max_asymmetry: f64,
    pub passes: bool,
}

pub fn b_symmetry_verify(
    variant: SchemeVariant,
    params: &PhysicalParams,
    space: &Arc<DgSpace>,
    trials: usize,
    seed: u64,
) -> Result<SymmetryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let phi = random_bounded_field(space, &mut rng, 0.99)?;
        let v = random_coefficients(space, &mut rng)?;
        let w = random_coefficients(space, &mut rng)?;
        let vw = apply_b(variant, params, &phi, &v, &w)?;
        let wv = apply_b(variant, params, &phi, &w, &v)?;
        worst = worst.max((vw - wv).abs() / (vw.abs() + wv.abs() + 1.0));
    }
    Ok(SymmetryReport {
        variant: variant.name().to_string(),
        trials,
        max_asymmetry: worst,
        passes: worst <= 1e-12,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MassMechanismReport {
    pub trials: usize,
    /// Largest `|b(phi; v, 1)|` over all variants.
    pub max_mobility: f64,
    /// Largest `|c(u; phi, 1)|`.
    pub max_advection: f64,
    /// Largest `|a(phi, 1)|`.
    pub max_laplacian: f64,
    pub passes: bool,
}

/// Tests with `psi = 1` must vanish identically: this is what makes the
/// scheme conservative.
pub fn mass_mechanism_verify(params: &PhysicalParams, space: &Arc<DgSpace>, trials: usize, seed: u64) -> Result<MassMechanismReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = DgField::constant(space, 1.0);
    let velocity: VelocityField = Arc::new(|x: &Point, t: f64| [(3.0 * x[1]).sin() + t, x[0] * x[0] - 0.5, 0.0]);
    let mut report = MassMechanismReport {
        trials,
        max_mobility: 0.0,
        max_advection: 0.0,
        max_laplacian: 0.0,
        passes: false,
    };
    for _ in 0..trials {
        let phi = random_bounded_field(space, &mut rng, 0.99)?;
        let v = random_coefficients(space, &mut rng)?;
        for variant in SchemeVariant::ALL {
            report.max_mobility = report.max_mobility.max(apply_b(variant, params, &phi, &v, &one)?.abs());
        }
        report.max_advection = report.max_advection.max(apply_c(&velocity, 0.3, &v, &one)?.abs());
        report.max_laplacian = report.max_laplacian.max(apply_a(params, &v, &one)?.abs());
    }
    report.passes = report.max_mobility <= 1e-12 && report.max_advection <= 1e-12 && report.max_laplacian <= 1e-12;
    Ok(report)
}

fn random_coefficients(space: &Arc<DgSpace>, rng: &mut ChaCha8Rng) -> Result<DgField> {
    DgField::from_coeffs(space, (0..space.ndofs()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Sampled ratios of both trace inequalities to their bounds.
#[derive(Clone, Debug, Serialize)]
pub struct TraceReport {
    pub p_minus: usize,
    pub p_plus: usize,
    pub dim: usize,
    pub samples: usize,
    /// Single-cell inequality, degree `p_plus`.
    pub single_cell_max_ratio: f64,
    /// Supremum of the single-cell ratio from a generalized eigenproblem.
    pub single_cell_sharp_ratio: f64,
    /// Two-cell inequality with the larger constant of both sides.
    pub two_cell_max_ratio: f64,
    pub passes: bool,
}

/// Tolerance on observed ratios.
pub const TRACE_SLACK: f64 = 1e-10;

/// Samples random polynomials on random boxes and compares both sides of
/// the single-cell and two-cell trace inequalities.
pub fn trace_verify(p_minus: usize, p_plus: usize, dim: usize, samples: usize, seed: u64) -> Result<TraceReport> {
    if !(2..=3).contains(&dim) {
        return Err(Error::InvalidInput(format!("dimension must be 2 or 3, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut single: f64 = 0.0;
    let mut pair: f64 = 0.0;
    let c_minus = trace_constant(p_minus, dim);
    let c_plus = trace_constant(p_plus, dim);
    let c_e = c_minus.max(c_plus);
    let cell_minus = TraceCell::new(p_minus, dim);
    let cell_plus = TraceCell::new(p_plus, dim);
    for _ in 0..samples {
        let h: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..2.0)).collect();
        let h_other = rng.random_range(0.2..2.0);
        let cp: Vec<f64> = (0..cell_plus.n_modes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cm: Vec<f64> = (0..cell_minus.n_modes).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Single cell: the plus cell, face at its lower normal end.
        let face_sq = cell_plus.face_normal_sq(&cp, &h, false);
        let grad_sq = cell_plus.gradient_sq(&cp, &h);
        let area: f64 = h[1..].iter().product();
        let vol: f64 = h.iter().product();
        let rhs = area / vol * c_plus * grad_sq;
        single = single.max(ratio(face_sq, rhs));

        // Two cells sharing the face x_0 = 0, the minus cell of normal length h_other.
        let mut hm = h.clone();
        hm[0] = h_other;
        let avg_sq = average_normal_sq(&cell_minus, &cm, &hm, &cell_plus, &cp, &h);
        let vol_minus: f64 = hm.iter().product();
        let h_e = 2.0 * vol * vol_minus / (area * (vol + vol_minus));
        let rhs2 = c_e / (2.0 * h_e) * (cell_plus.normal_sq(&cp, &h) + cell_minus.normal_sq(&cm, &hm));
        pair = pair.max(ratio(avg_sq, rhs2));
    }
    let sharp = cell_plus.sharp_ratio(c_plus)?;
    Ok(TraceReport {
        p_minus,
        p_plus,
        dim,
        samples,
        single_cell_max_ratio: single,
        single_cell_sharp_ratio: sharp,
        two_cell_max_ratio: pair,
        passes: single <= 1.0 + TRACE_SLACK && pair <= 1.0 + TRACE_SLACK,
    })
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs <= 1e-300 && rhs <= 1e-300 {
        0.0
    } else if rhs <= 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}

/// Reference tabulations for the trace checks on `[-1, 1]^d`.
struct TraceCell {
    dim: usize,
    n_modes: usize,
    volume_w: Vec<f64>,
    volume: Tabulation,
    face_w: Vec<f64>,
    lower: Tabulation,
    upper: Tabulation,
}

impl TraceCell {
    fn new(p: usize, dim: usize) -> Self {
        let rule = GaussRule::new(p + 1);
        let (vp, volume_w) = tensor_rule(&rule, dim);
        let (fp, face_w) = tensor_rule(&rule, dim - 1);
        let on_face = |side: f64| -> Vec<[f64; 3]> {
            fp.iter()
                .map(|t| {
                    let mut x = [0.0; 3];
                    x[0] = side;
                    x[1..dim].copy_from_slice(&t[..dim - 1]);
                    x
                })
                .collect()
        };
        let volume = Tabulation::new(p, dim, &vp);
        Self {
            dim,
            n_modes: volume.n_modes,
            volume_w,
            volume,
            face_w,
            lower: Tabulation::new(p, dim, &on_face(-1.0)),
            upper: Tabulation::new(p, dim, &on_face(1.0)),
        }
    }

    fn derivative(tab: &Tabulation, c: &[f64], q: usize, k: usize, h: &[f64]) -> f64 {
        2.0 / h[k] * (0..tab.n_modes).map(|i| c[i] * tab.grad(q, i, k)).sum::<f64>()
    }

    /// `||d phi / d x_0||^2` on the lower (`upper = false`) or upper face.
    fn face_normal_sq(&self, c: &[f64], h: &[f64], upper: bool) -> f64 {
        let tab = if upper { &self.upper } else { &self.lower };
        let jac: f64 = h[1..].iter().map(|x| x / 2.0).product();
        (0..tab.n_points)
            .map(|q| self.face_w[q] * jac * Self::derivative(tab, c, q, 0, h).powi(2))
            .sum()
    }

    fn face_normal(&self, c: &[f64], h: &[f64], upper: bool) -> Vec<f64> {
        let tab = if upper { &self.upper } else { &self.lower };
        (0..tab.n_points).map(|q| Self::derivative(tab, c, q, 0, h)).collect()
    }

    fn gradient_sq(&self, c: &[f64], h: &[f64]) -> f64 {
        let jac: f64 = h.iter().map(|x| x / 2.0).product();
        (0..self.volume.n_points)
            .map(|q| {
                let g: f64 = (0..self.dim).map(|k| Self::derivative(&self.volume, c, q, k, h).powi(2)).sum();
                self.volume_w[q] * jac * g
            })
            .sum()
    }

    fn normal_sq(&self, c: &[f64], h: &[f64]) -> f64 {
        let jac: f64 = h.iter().map(|x| x / 2.0).product();
        (0..self.volume.n_points)
            .map(|q| self.volume_w[q] * jac * Self::derivative(&self.volume, c, q, 0, h).powi(2))
            .sum()
    }

    /// `sup ||d_n phi||_e^2 / ((|e| / |K|) C_K ||grad phi||_K^2)` on the unit cube.
    fn sharp_ratio(&self, c_k: f64) -> Result<f64> {
        if self.n_modes <= 1 || c_k == 0.0 {
            return Ok(0.0);
        }
        let n = self.n_modes;
        let h = vec![2.0; self.dim];
        let mut f = DMatrix::zeros(n, n);
        let mut g = DMatrix::zeros(n, n);
        let unit = |i: usize| -> Vec<f64> { (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect() };
        let traces: Vec<Vec<f64>> = (0..n).map(|i| self.face_normal(&unit(i), &h, false)).collect();
        for i in 0..n {
            for j in 0..n {
                f[(i, j)] = (0..self.lower.n_points).map(|q| self.face_w[q] * traces[i][q] * traces[j][q]).sum();
                g[(i, j)] = (0..self.volume.n_points)
                    .map(|q| {
                        self.volume_w[q]
                            * (0..self.dim)
                                .map(|k| self.volume.grad(q, i, k) * self.volume.grad(q, j, k))
                                .sum::<f64>()
                    })
                    .sum();
            }
        }
        // Mode 0 is the constant; the gradient Gram matrix is definite on the rest.
        let f = f.view((1, 1), (n - 1, n - 1)).into_owned();
        let g = g.view((1, 1), (n - 1, n - 1)).into_owned();
        let max = generalized_eigenvalues(&f, &g)?.into_iter().fold(0.0, f64::max);
        // |e| / |K| = 1/2 on the reference cube.
        Ok(max / (0.5 * c_k))
    }
}

fn average_normal_sq(minus: &TraceCell, cm: &[f64], hm: &[f64], plus: &TraceCell, cp: &[f64], hp: &[f64]) -> f64 {
    let dim = plus.dim;
    let n_pts = minus.n_modes.max(plus.n_modes);
    let rule = GaussRule::new(n_pts.min(crate::dgspace::basis::MAX_ORDER + 1).max(1));
    let (fp, fw) = tensor_rule(&rule, dim - 1);
    let at = |side: f64| -> Vec<[f64; 3]> {
        fp.iter()
            .map(|t| {
                let mut x = [0.0; 3];
                x[0] = side;
                x[1..dim].copy_from_slice(&t[..dim - 1]);
                x
            })
            .collect()
    };
    let tm = Tabulation::new(degree_of(minus), dim, &at(1.0));
    let tp = Tabulation::new(degree_of(plus), dim, &at(-1.0));
    let jac: f64 = hp[1..].iter().map(|x| x / 2.0).product();
    (0..fp.len())
        .map(|q| {
            let a = 0.5 * (TraceCell::derivative(&tm, cm, q, 0, hm) + TraceCell::derivative(&tp, cp, q, 0, hp));
            fw[q] * jac * a * a
        })
        .sum()
}

fn degree_of(cell: &TraceCell) -> usize {
    let mut p = 0;
    while crate::dgspace::basis::num_modes(p, cell.dim) < cell.n_modes {
        p += 1;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::MOBILITY_FLOOR;
    use crate::mesh::{AdaptiveMesh, BoxDomain, CellAction};
    use proptest::prelude::*;

    fn uniform(n: usize, p: usize) -> Arc<DgSpace> {
        DgSpace::from_mesh(AdaptiveMesh::build_uniform(BoxDomain::unit(2), n, 2, p).unwrap())
    }

    fn params(beta: f64) -> PhysicalParams {
        PhysicalParams::new(0.1, 1.0, MOBILITY_FLOOR, beta, 2).unwrap()
    }

    fn mixed_space() -> Arc<DgSpace> {
        mixed_order_space(4).unwrap()
    }

    #[test]
    fn mass_of_simple_fields() {
        let s = uniform(4, 1);
        assert!((mass(&DgField::constant(&s, 0.3)) - 0.3).abs() < 1e-15);
        assert!(mass(&DgField::l2_project(&s, |x| x[0] - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn energy_of_constant_states() {
        let s = uniform(4, 2);
        let prm = params(5.0);
        let e = EnergyParams::standalone();
        assert!((energy(&DgField::zeros(&s), &e, &prm, 0.0) - 0.25).abs() < 1e-14);
        assert!(energy(&DgField::constant(&s, 1.0), &e, &prm, 0.0).abs() < 1e-14);
        let c = 0.4;
        let scaled = EnergyParams::with_weber(2.0, 0.1, 1.0, 1.0, None).unwrap();
        let got = energy(&DgField::constant(&s, c), &scaled, &prm, 0.0);
        assert!((got - 5.0 * double_well(c)).abs() < 1e-13);
    }

    #[test]
    fn kinetic_energy_of_uniform_flow() {
        let s = uniform(2, 1);
        let prm = params(5.0);
        let u: VelocityField = Arc::new(|_: &Point, _| [2.0, 0.0, 0.0]);
        let e = EnergyParams {
            interface_prefactor: 0.0,
            rho1: 3.0,
            rho2: 1.0,
            velocity: Some(u),
        };
        // rho(1) = 3, |u|^2 / 2 = 2.
        assert!((energy(&DgField::constant(&s, 1.0), &e, &prm, 0.0) - 6.0).abs() < 1e-13);
    }

    #[test]
    fn error_norms_vanish_for_the_field_itself() {
        let s = uniform(3, 2);
        let phi = DgField::l2_project(&s, |x| x[0] * x[0] - 0.5 * x[1]);
        let (l2, h1) = error_norms(&phi, &|x| (x[0] * x[0] - 0.5 * x[1], [2.0 * x[0], -0.5, 0.0]));
        assert!(l2 < 1e-13 && h1 < 1e-13, "{l2} {h1}");
        let (l2, h1) = error_norms(&phi, &|x| (x[0] * x[0] - 0.5 * x[1] + 1.0, [2.0 * x[0], -0.5, 0.0]));
        assert!((l2 - 1.0).abs() < 1e-13 && h1 < 1e-13);
    }

    #[test]
    fn eoc_values() {
        let e = eoc(&[1.29e-3, 3.41e-4], &[32, 64]).unwrap();
        assert!((e[0] - 1.92).abs() < 5e-3);
        assert_eq!(eoc(&[4e-2, 1e-2], &[8, 16]).unwrap(), vec![2.0]);
        let e = eoc(&[5.50e-3, 1.40e-3], &[8, 16]).unwrap();
        assert!((e[0] - 1.97).abs() < 5e-3);
        assert!(eoc(&[1.0], &[8, 16]).is_err());
        assert!(eoc(&[1.0, 0.5], &[8, 12]).is_err());
    }

    proptest! {
        #[test]
        fn eoc_is_scale_invariant(
            errs in proptest::collection::vec(1e-8f64..1.0, 2..6),
            scale in 1e-3f64..1e3,
        ) {
            let ns: Vec<usize> = (0..errs.len()).map(|k| 4 << k).collect();
            let a = eoc(&errs, &ns).unwrap();
            let scaled: Vec<f64> = errs.iter().map(|e| e * scale).collect();
            let b = eoc(&scaled, &ns).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn energy_of_constants_is_the_bulk_term(c in -1.0f64..1.0) {
            let s = uniform(2, 1);
            let prm = params(5.0);
            let e = energy(&DgField::constant(&s, c), &EnergyParams::standalone(), &prm, 0.0);
            prop_assert!((e - double_well(c)).abs() < 1e-14);
        }
    }

    #[test]
    fn limiter_properties_hold() {
        let r = limiter_verify(200, 1).unwrap();
        assert!(r.passes, "{r:?}");
    }

    #[test]
    fn mobility_form_is_symmetric_and_conservative() {
        let s = hanging_face_space(2).unwrap();
        for variant in SchemeVariant::ALL {
            let r = b_symmetry_verify(variant, &params(5.0), &s, 3, 4).unwrap();
            assert!(r.passes, "{r:?}");
        }
        let r = mass_mechanism_verify(&params(5.0), &s, 3, 5).unwrap();
        assert!(r.passes, "{r:?}");
    }

    #[test]
    fn zero_order_mobility_form_has_unit_eigenvalues() {
        let s = uniform(4, 0);
        for variant in SchemeVariant::ALL {
            let r = coercivity_verify(variant, &params(1.0), &s, 3, 0.99, 1.0, 7).unwrap();
            for l in &r.trial_eigenvalues {
                assert!(*l >= 1.0 - 1e-10, "{variant}: {l}");
            }
        }
    }

    #[test]
    fn mixed_order_forms_are_coercive() {
        let s = mixed_space();
        for variant in SchemeVariant::ALL {
            let r = coercivity_verify(variant, &params(5.0), &s, 20, 0.99, 1.0, 11).unwrap();
            assert!(r.coercive, "{variant}: {:?}", r.trial_eigenvalues);
        }
    }

    #[test]
    fn tiny_penalty_loses_coercivity() {
        let s = mixed_space();
        let r = coercivity_verify(SchemeVariant::SipgL, &params(1.0), &s, 5, 0.99, 0.01, 3).unwrap();
        assert!(!r.coercive, "{:?}", r.trial_eigenvalues);
    }

    #[test]
    fn coercivity_eigenvalue_is_scale_invariant() {
        let build = |len: f64| {
            let m = AdaptiveMesh::build_uniform(BoxDomain::new(&[0.0, 0.0], &[len, len]), 3, 2, 1).unwrap();
            DgSpace::from_mesh(m)
        };
        let a = build(1.0);
        let b = build(7.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi_a = random_bounded_field(&a, &mut rng, 0.9).unwrap();
        let phi_b = DgField::from_coeffs(&b, phi_a.coeffs().iter().map(|c| c * 7.0).collect()).unwrap();
        let la = coercivity_eigenvalue(SchemeVariant::SwipdL, &params(5.0), &phi_a, 1.0).unwrap();
        let lb = coercivity_eigenvalue(SchemeVariant::SwipdL, &params(5.0), &phi_b, 1.0).unwrap();
        assert!((la - lb).abs() < 1e-10, "{la} {lb}");
    }

    #[test]
    fn coercivity_rejects_large_or_unbounded_input() {
        let big = uniform(12, 2);
        let phi = DgField::zeros(&big);
        assert!(matches!(
            coercivity_eigenvalue(SchemeVariant::SipgL, &params(5.0), &phi, 1.0),
            Err(Error::TooLarge { .. })
        ));
        let s = uniform(2, 1);
        let phi = DgField::constant(&s, 1.0);
        assert!(coercivity_eigenvalue(SchemeVariant::SipgL, &params(5.0), &phi, 1.0).is_err());
    }

    #[test]
    fn refined_mesh_is_coercive() {
        let base = AdaptiveMesh::build_uniform(BoxDomain::unit(2), 3, 2, 1).unwrap();
        let mut marks = vec![CellAction::KEEP; 9];
        marks[4] = CellAction::REFINE_H;
        let limits = crate::mesh::AdaptLimits {
            p_min: 0,
            p_max: 2,
            max_level: 2,
        };
        let s = DgSpace::from_mesh(base.adapt(&marks, limits).unwrap().mesh);
        let r = coercivity_verify(SchemeVariant::SwipL, &params(5.0), &s, 5, 0.99, 1.0, 2).unwrap();
        assert!(r.coercive);
    }

    #[test]
    fn trace_inequalities_hold_for_linear_polynomials() {
        let r = trace_verify(1, 1, 2, 500, 1).unwrap();
        assert!(r.passes, "{r:?}");
        assert!(r.single_cell_sharp_ratio <= 1.0 + 1e-10);
        let r = trace_verify(1, 1, 3, 200, 2).unwrap();
        assert!(r.passes, "{r:?}");
    }

    #[test]
    fn trace_inequalities_are_trivial_for_constants() {
        let r = trace_verify(0, 0, 2, 50, 3).unwrap();
        assert_eq!(r.single_cell_max_ratio, 0.0);
        assert_eq!(r.two_cell_max_ratio, 0.0);
        assert!(r.passes);
    }

    #[test]
    fn quadratic_counterexample_to_the_single_cell_constant() {
        // On [-1, 1]^2 take phi = x - 3x^2/2, so d_n phi = 1 - 3x with
        // (d_n phi)^2 = 16 on x = -1, face norm 32 and ||grad phi||^2 = 16.
        // The bound is |e|/|K| C_K = 3/2 times 16, giving the ratio 4/3.
        let r = trace_verify(2, 2, 2, 10, 4).unwrap();
        assert!(r.single_cell_sharp_ratio > 1.0, "{r:?}");
        assert!((r.single_cell_sharp_ratio - 4.0 / 3.0).abs() < 1e-10, "{r:?}");
    }
}
