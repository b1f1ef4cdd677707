//! The `converge`, `run` and `verify` commands.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use chdg::dgspace::DgSpace;
use chdg::diagnostics::{
    b_symmetry_verify, coercivity_verify, hanging_face_space, limiter_verify, mass_mechanism_verify, mixed_order_space,
    trace_verify, CoercivityReport, EnergyParams, LimiterReport, MassMechanismReport, RunDiagnostics, StepRecord,
    StructureChecks, StructureTolerances, SymmetryReport, TraceReport,
};
use chdg::forms::{PhysicalParams, SchemeVariant, VelocityField};
use chdg::mesh::{AdaptiveMesh, BoxDomain};
use chdg::problems::{
    droplet_profile, merging_droplets, merging_droplets_domain, rotating_droplets, rotating_droplets_domain,
    swirl_velocity, trig_errors, TrigCase,
};
use chdg::solver::{run, RunSetup, StepConfig};
use chdg::Error;
use serde::Serialize;

use crate::config::{Experiment, RunConfig};
use crate::output::{write_json, write_vtk, SeriesWriter};

/// Whether the command met all its checks.
pub type Passed = bool;

#[derive(Clone, Debug, Serialize)]
pub struct ConvergeRow {
    pub variant: SchemeVariant,
    pub p: usize,
    pub n: usize,
    pub dt: f64,
    pub l2: Option<f64>,
    pub l2_eoc: Option<f64>,
    pub h1: Option<f64>,
    pub h1_eoc: Option<f64>,
    pub steps: Option<usize>,
    pub dofs: Option<usize>,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct ConvergeSummary<'a> {
    config: &'a RunConfig,
    rows: &'a [ConvergeRow],
    passed: bool,
}

pub fn converge(cfg: &RunConfig) -> Result<Passed> {
    if !cfg.experiment.is_convergence() {
        bail!("converge needs experiment trig2d or trig3d, got {:?}", cfg.experiment);
    }
    let out = prepare_dir(&cfg.output.dir)?;
    let params = cfg.params()?;
    let mut rows = Vec::new();
    for variant in cfg.sweep_variants() {
        let mut previous: Option<(usize, f64, f64)> = None;
        for &n in &cfg.mesh.n {
            let dt = cfg.dt.resolve(n, cfg.mesh.p)?;
            let case = TrigCase {
                variant,
                params,
                amplitude: cfg.physics.amplitude,
                n,
                p: cfg.mesh.p,
                dt,
                final_time: cfg.final_time,
                linear: cfg.linear,
            };
            let started = Instant::now();
            let mut row = ConvergeRow {
                variant,
                p: cfg.mesh.p,
                n,
                dt,
                l2: None,
                l2_eoc: None,
                h1: None,
                h1_eoc: None,
                steps: None,
                dofs: None,
                error: None,
            };
            match trig_errors(&case) {
                Ok(e) => {
                    if let Some((pn, pl2, ph1)) = previous {
                        if n == 2 * pn {
                            row.l2_eoc = Some((pl2 / e.l2).log2());
                            row.h1_eoc = Some((ph1 / e.h1).log2());
                        }
                    }
                    previous = Some((n, e.l2, e.h1));
                    row.l2 = Some(e.l2);
                    row.h1 = Some(e.h1);
                    row.steps = Some(e.steps);
                    row.dofs = Some(e.dofs);
                }
                Err(e) => {
                    previous = None;
                    row.error = Some(e.to_string());
                }
            }
            eprintln!(
                "{variant} p={} N={n}: L2 {} H1 {} ({:.1} s)",
                cfg.mesh.p,
                fmt_opt(row.l2),
                fmt_opt(row.h1),
                started.elapsed().as_secs_f64()
            );
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_path(out.join("eoc.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let passed = rows.iter().all(|r| r.error.is_none());
    write_json(
        &out.join("summary.json"),
        &ConvergeSummary {
            config: cfg,
            rows: &rows,
            passed,
        },
    )?;
    Ok(passed)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "-".into())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a RunConfig,
    params: PhysicalParams,
    steps_completed: usize,
    final_time: f64,
    tolerances: StructureTolerances,
    checks: StructureChecks,
    /// Energy monotonicity is only asserted without advection.
    energy_asserted: bool,
    max_dofs: usize,
    failed_step: Option<usize>,
    error: Option<String>,
    passed: bool,
}

pub fn run_experiment(cfg: &RunConfig) -> Result<Passed> {
    if cfg.experiment.is_convergence() {
        bail!("run needs experiment droplets, rotation or custom, got {:?}", cfg.experiment);
    }
    let out = prepare_dir(&cfg.output.dir)?;
    let params = cfg.params()?;
    let cn = params.cn;
    let (domain, initial): (BoxDomain, Box<dyn Fn(&chdg::mesh::Point) -> f64 + Sync>) = match cfg.experiment {
        Experiment::Droplets => (merging_droplets_domain(), Box::new(merging_droplets(cn))),
        Experiment::Rotation => (rotating_droplets_domain(), Box::new(rotating_droplets(cn))),
        Experiment::Custom => {
            let c = cfg.custom.as_ref().context("custom profile")?;
            (
                BoxDomain::new(&c.domain.lower, &c.domain.upper),
                Box::new(droplet_profile(&cfg.droplets(), cn, c.bulk)),
            )
        }
        Experiment::Trig2d | Experiment::Trig3d => unreachable!(),
    };
    let velocity: Option<VelocityField> = (cfg.physics.chi != 0.0).then(|| swirl_velocity(cfg.physics.chi));
    let energy = if cfg.physics.coupled_energy {
        EnergyParams::with_weber(cfg.weber(), cn, cfg.physics.rho1, cfg.physics.rho2, velocity.clone())?
    } else {
        EnergyParams::standalone()
    };
    let mut step = StepConfig::new(cfg.dt.resolve(cfg.mesh.base_n, cfg.mesh.p)?);
    step.nonlinear_tol = cfg.nonlinear_tol;
    step.max_nonlinear_iters = cfg.max_nonlinear_iters;
    step.max_dt_halvings = cfg.max_dt_halvings;
    step.linear = cfg.linear;
    step.velocity = velocity.clone();
    let tau = step.dt;
    let setup = RunSetup {
        variant: cfg.variant,
        params,
        step,
        final_time: cfg.final_time,
        forcing: None,
        adapt: cfg.adapt,
        energy,
    };
    let mesh = AdaptiveMesh::build_uniform(domain, cfg.mesh.base_n, 2, cfg.mesh.p)?;
    let space: Arc<DgSpace> = DgSpace::from_mesh(mesh);

    let mut series = SeriesWriter::create(&out.join("series.csv"))?;
    let mut records: Vec<StepRecord> = Vec::new();
    let mut io_error: Option<anyhow::Error> = None;
    let started = Instant::now();
    let vtk_every = cfg.output.vtk_every;
    let result = run(&space, &*initial, &setup, &mut |state, record| {
        if io_error.is_some() {
            return;
        }
        let mut write = || -> Result<()> {
            series.push(record)?;
            if vtk_every > 0 && record.step % vtk_every == 0 {
                write_vtk(
                    &out.join(format!("fields_{}.vtk", record.step)),
                    &state.phi,
                    &state.upsilon,
                    record.time,
                )?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            io_error = Some(e);
        }
        eprintln!(
            "step {:5} t={:.5} m={:.15e} E={:.10e} dofs {} ({:.1} s)",
            record.step,
            record.time,
            record.mass,
            record.energy,
            record.dofs,
            started.elapsed().as_secs_f64()
        );
        records.push(record.clone());
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let (failed_step, error) = match &result {
        Ok(_) => (None, None),
        Err(Error::Step { step, source }) => (Some(*step), Some(source.to_string())),
        Err(e) => (None, Some(e.to_string())),
    };
    let steps_completed = records.len().saturating_sub(1);
    let planned = if cfg.final_time > 0.0 {
        ((cfg.final_time / tau) - 1e-9).ceil() as usize
    } else {
        0
    };
    let tolerances = StructureTolerances::for_run(planned, cfg.nonlinear_tol);
    let mut diagnostics = RunDiagnostics::new(cfg.variant, params, String::new());
    diagnostics.records = records;
    let checks = diagnostics.check(&tolerances);
    let energy_asserted = cfg.physics.chi == 0.0;
    let passed = error.is_none() && checks.mass_ok && checks.bounds_ok && (checks.energy_ok || !energy_asserted);
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            config: cfg,
            params,
            steps_completed,
            final_time: diagnostics.records.last().map(|r| r.time).unwrap_or(0.0),
            tolerances,
            checks,
            energy_asserted,
            max_dofs: diagnostics.records.iter().map(|r| r.dofs).max().unwrap_or(0),
            failed_step,
            error,
            passed,
        },
    )?;
    Ok(passed)
}

#[derive(Serialize)]
pub struct NegativeControl {
    pub report: CoercivityReport,
    /// True when some trial lost coercivity, showing the penalty bound matters.
    pub falsified: bool,
}

#[derive(Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub beta: f64,
    pub trace: Vec<TraceReport>,
    pub coercivity: Vec<CoercivityReport>,
    pub piecewise_constant: Vec<CoercivityReport>,
    pub negative_control: NegativeControl,
    pub limiter: LimiterReport,
    pub symmetry: Vec<SymmetryReport>,
    pub mass_mechanism: MassMechanismReport,
    pub failures: Vec<String>,
    pub passed: bool,
}

pub fn verify(cfg: &RunConfig) -> Result<Passed> {
    let report = verify_report(cfg)?;
    let out = prepare_dir(&cfg.output.dir)?;
    write_json(&out.join("verify.json"), &report)?;
    for f in &report.failures {
        eprintln!("FAIL {f}");
    }
    Ok(report.passed)
}

pub fn verify_report(cfg: &RunConfig) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let seed = cfg.seed;
    let params = PhysicalParams::new(0.1, 1.0, cfg.physics.delta, cfg.physics.beta, 2)?;
    let mut failures = Vec::new();

    let mut trace = Vec::new();
    for dim in 2..=3 {
        for p_minus in 0..=2 {
            for p_plus in 0..=2 {
                let r = trace_verify(p_minus, p_plus, dim, v.trace_samples, seed)?;
                if !r.passes {
                    failures.push(format!(
                        "trace (p-={p_minus}, p+={p_plus}, d={dim}): single-cell ratio {:.6}, two-cell ratio {:.6}",
                        r.single_cell_max_ratio, r.two_cell_max_ratio
                    ));
                }
                trace.push(r);
            }
        }
    }

    let mixed = mixed_order_space(4)?;
    let mut coercivity = Vec::new();
    for variant in SchemeVariant::ALL {
        let r = coercivity_verify(variant, &params, &mixed, v.coercivity_trials, 0.99, 1.0, seed)?;
        if !r.coercive {
            failures.push(format!("coercivity {variant}: min eigenvalue {:e}", r.min_eigenvalue));
        }
        coercivity.push(r);
    }
    let constant = DgSpace::from_mesh(AdaptiveMesh::build_uniform(BoxDomain::unit(2), 4, 2, 0)?);
    let mut piecewise_constant = Vec::new();
    for variant in SchemeVariant::ALL {
        let r = coercivity_verify(variant, &params, &constant, v.coercivity_trials, 0.99, 1.0, seed)?;
        if r.min_eigenvalue < 1.0 - 1e-10 {
            failures.push(format!("piecewise-constant coercivity {variant}: {:e}", r.min_eigenvalue));
        }
        piecewise_constant.push(r);
    }
    let control = coercivity_verify(
        SchemeVariant::SipgL,
        &params,
        &mixed,
        v.coercivity_trials,
        0.99,
        v.negative_control_scale,
        seed,
    )?;
    let negative_control = NegativeControl {
        falsified: !control.coercive,
        report: control,
    };

    let limiter = limiter_verify(v.limiter_samples, seed)?;
    if !limiter.passes {
        failures.push(format!("limiter: {limiter:?}"));
    }
    let hanging = hanging_face_space(seed)?;
    let mut symmetry = Vec::new();
    for variant in SchemeVariant::ALL {
        let r = b_symmetry_verify(variant, &params, &hanging, v.symmetry_trials, seed)?;
        if !r.passes {
            failures.push(format!("symmetry {variant}: {:e}", r.max_asymmetry));
        }
        symmetry.push(r);
    }
    let mass_mechanism = mass_mechanism_verify(&params, &hanging, v.symmetry_trials, seed)?;
    if !mass_mechanism.passes {
        failures.push(format!("mass mechanism: {mass_mechanism:?}"));
    }
    Ok(VerifyReport {
        seed,
        beta: params.beta,
        trace,
        coercivity,
        piecewise_constant,
        negative_control,
        limiter,
        symmetry,
        mass_mechanism,
        passed: failures.is_empty(),
        failures,
    })
}

fn prepare_dir(dir: &Path) -> Result<&Path> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
