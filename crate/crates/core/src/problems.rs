//! Initial data and prescribed velocities of the benchmark problems.

use std::sync::Arc;

use crate::dgspace::DgSpace;
use crate::diagnostics::{error_norms, EnergyParams};
use crate::forms::{manufactured_forcing, trig_solution, PhysicalParams, SchemeVariant, VelocityField};
use crate::mesh::{AdaptiveMesh, BoxDomain, Point};
use crate::solver::{run, LinearSolverConfig, RunSetup, StepConfig};
use crate::Result;

/// A circular droplet of the initial profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Droplet {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Clamped tanh-sum profile
/// `s * clamp(-1 + sum_j (1 + tanh((r_j - |x - c_j|) / (sqrt(2) Cn))), -1, 1)`.
pub fn droplet_profile(droplets: &[Droplet], cn: f64, bulk: f64) -> impl Fn(&Point) -> f64 + Clone + Send + Sync {
    let droplets = droplets.to_vec();
    let width = std::f64::consts::SQRT_2 * cn;
    move |x: &Point| {
        let mut s = -1.0;
        for d in &droplets {
            let r = ((x[0] - d.center[0]).powi(2) + (x[1] - d.center[1]).powi(2)).sqrt();
            s += 1.0 + ((d.radius - r) / width).tanh();
        }
        bulk * s.clamp(-1.0, 1.0)
    }
}

/// Two merging droplets on the unit square.
pub fn merging_droplets(cn: f64) -> impl Fn(&Point) -> f64 + Clone + Send + Sync {
    droplet_profile(
        &[
            Droplet {
                center: [0.3, 0.5],
                radius: 0.2,
            },
            Droplet {
                center: [0.7, 0.5],
                radius: 0.2,
            },
        ],
        cn,
        1.0 - 1e-8,
    )
}

pub fn merging_droplets_domain() -> BoxDomain {
    BoxDomain::unit(2)
}

/// Two droplets in the swirling flow on `[-0.5, 0.5]^2`.
pub fn rotating_droplets(cn: f64) -> impl Fn(&Point) -> f64 + Clone + Send + Sync {
    droplet_profile(
        &[
            Droplet {
                center: [0.1, 0.1],
                radius: 0.25,
            },
            Droplet {
                center: [-0.15, -0.15],
                radius: 0.15,
            },
        ],
        cn,
        0.995,
    )
}

pub fn rotating_droplets_domain() -> BoxDomain {
    BoxDomain::new(&[-0.5, -0.5], &[0.5, 0.5])
}

/// `u = chi (x2 (0.16 - |x|^2)_+, -x1 (0.16 - |x|^2)_+)`, frozen in time.
pub fn swirl_velocity(chi: f64) -> VelocityField {
    Arc::new(move |x: &Point, _t: f64| {
        let w = (0.16 - x[0] * x[0] - x[1] * x[1]).max(0.0);
        [chi * x[1] * w, -chi * x[0] * w, 0.0]
    })
}

/// `A prod_i cos(4 pi x_i)` on the unit box.
pub fn trig_initial(amplitude: f64, dim: usize) -> impl Fn(&Point) -> f64 + Clone + Send + Sync {
    let f = trig_solution(amplitude, dim);
    move |x: &Point| f(x).0
}

/// Time step `10^{-(2+p)} 2^{-(N-32)/32}` of the 2D convergence study.
pub fn trig2d_dt(p: usize, n: usize) -> f64 {
    10f64.powi(-(2 + p as i32)) * 2f64.powf(-(n as f64 - 32.0) / 32.0)
}

/// Time step rules of the 3D convergence study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trig3dDtRule {
    /// `10^{-3} 2^{-(N-8)/8}`
    PerEight,
    /// `10^{-3} 2^{-N/16}`
    PerSixteen,
}

pub fn trig3d_dt(rule: Trig3dDtRule, n: usize) -> f64 {
    let e = match rule {
        Trig3dDtRule::PerEight => (n as f64 - 8.0) / 8.0,
        Trig3dDtRule::PerSixteen => n as f64 / 16.0,
    };
    1e-3 * 2f64.powf(-e)
}

/// One entry of a manufactured-solution convergence sweep.
#[derive(Clone, Debug)]
pub struct TrigCase {
    pub variant: SchemeVariant,
    pub params: PhysicalParams,
    pub amplitude: f64,
    pub n: usize,
    pub p: usize,
    pub dt: f64,
    pub final_time: f64,
    pub linear: LinearSolverConfig,
}

/// Errors of a trig run at the final time.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct TrigErrors {
    pub l2: f64,
    pub h1: f64,
    pub steps: usize,
    pub dofs: usize,
}

/// Runs the stationary manufactured problem on the uniform `N^d` mesh and
/// measures the error against `phi0` at the final time.
pub fn trig_errors(case: &TrigCase) -> Result<TrigErrors> {
    let dim = case.params.dim;
    let mesh = AdaptiveMesh::build_uniform(BoxDomain::unit(dim), case.n, dim, case.p)?;
    let space = DgSpace::from_mesh(mesh);
    let mut step = StepConfig::new(case.dt);
    step.linear = case.linear;
    let setup = RunSetup {
        variant: case.variant,
        params: case.params,
        step,
        final_time: case.final_time,
        forcing: Some(Arc::new(manufactured_forcing(&case.params, case.amplitude))),
        adapt: None,
        energy: EnergyParams::standalone(),
    };
    let initial = trig_initial(case.amplitude, dim);
    let outcome = run(&space, &initial, &setup, &mut |_, _| {})?;
    let exact = trig_solution(case.amplitude, dim);
    let (l2, h1) = error_norms(&outcome.state.phi, &exact);
    Ok(TrigErrors {
        l2,
        h1,
        steps: outcome.diagnostics.records.len() - 1,
        dofs: space.ndofs(),
    })
}
