//! hp-adaptivity: interface indicator, marking and solution transfer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dgspace::basis::{mode_degrees, mode_index, Tabulation, MAX_ORDER};
use crate::dgspace::quadrature::{tensor_rule, GaussRule};
use crate::dgspace::space::CellMap;
use crate::dgspace::{DgField, DgSpace};
use crate::error::{Error, Result};
use crate::mesh::{AdaptLimits, Adapted, AdaptiveMesh, CellAction, CellOrigin, HMark, PMark};
use crate::solver::{limit_in_place, ChState};

/// Which side of the thresholds gets refined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkingDirection {
    /// Refine where the minimum of `H` falls below the refine threshold and
    /// coarsen where it exceeds the coarsen thresholds.
    BulkRefining,
    /// Refine where the maximum of `H` exceeds `1/4 - t_refine` and coarsen
    /// where it falls below `1/4 - t_coarsen`.
    #[default]
    InterfaceRefining,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub h_min: f64,
    pub h_max: f64,
    pub p_min: usize,
    pub p_max: usize,
    pub h_refine_threshold: f64,
    pub h_coarsen_threshold: f64,
    pub p_coarsen_threshold: f64,
    pub direction: MarkingDirection,
    /// Steps between adapt calls; 0 adapts only the initial data.
    pub adapt_every: usize,
    /// Adapt-and-reproject cycles applied to the initial data.
    pub initial_cycles: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            h_min: 1.0 / 256.0,
            h_max: 1.0 / 128.0,
            p_min: 1,
            p_max: 2,
            h_refine_threshold: 0.0525,
            h_coarsen_threshold: 0.15,
            p_coarsen_threshold: 0.075,
            direction: MarkingDirection::InterfaceRefining,
            adapt_every: 1,
            initial_cycles: 3,
        }
    }
}

/// Upper end of the range of `H`.
pub const INDICATOR_MAX: f64 = 0.25;

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_min > 0.0 && self.h_min <= self.h_max) {
            return Err(Error::InvalidInput(format!(
                "need 0 < h_min <= h_max, got {} and {}",
                self.h_min, self.h_max
            )));
        }
        if self.p_min > self.p_max || self.p_max >= MAX_ORDER {
            return Err(Error::InvalidInput(format!(
                "need p_min <= p_max < {MAX_ORDER}, got {} and {}",
                self.p_min, self.p_max
            )));
        }
        for t in [self.h_refine_threshold, self.h_coarsen_threshold, self.p_coarsen_threshold] {
            if !(0.0..=INDICATOR_MAX).contains(&t) {
                return Err(Error::InvalidInput(format!("threshold {t} outside [0, 1/4]")));
            }
        }
        Ok(())
    }

    /// Finest level allowed on `mesh`.
    pub fn max_level(&self, mesh: &AdaptiveMesh) -> u32 {
        let mut level = 0;
        while (0..mesh.dim()).any(|k| mesh.level_size(level, k) > self.h_min * (1.0 + 1e-12)) && level < 30 {
            level += 1;
        }
        level
    }

    /// Coarsest level allowed on `mesh`.
    pub fn min_level(&self, mesh: &AdaptiveMesh) -> u32 {
        let mut level = 0;
        while (0..mesh.dim()).any(|k| mesh.level_size(level, k) > self.h_max * (1.0 + 1e-12)) && level < 30 {
            level += 1;
        }
        level
    }

    pub fn limits(&self, mesh: &AdaptiveMesh) -> AdaptLimits {
        AdaptLimits {
            p_min: self.p_min,
            p_max: self.p_max,
            max_level: self.max_level(mesh),
        }
    }
}

/// `H(phi) = (1 - phi^2) / 4`.
pub fn interface_function(phi: f64) -> f64 {
    0.25 * (1.0 - phi * phi)
}

/// Minimum (bulk-refining) or maximum (interface-refining) of `H(phi)` over
/// the volume quadrature points of `cell`.
pub fn indicator(phi: &DgField, cell: usize, direction: MarkingDirection) -> f64 {
    let values = phi.volume_values(cell).into_iter().map(interface_function);
    match direction {
        MarkingDirection::BulkRefining => values.fold(f64::INFINITY, f64::min),
        MarkingDirection::InterfaceRefining => values.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Per-cell actions, already clipped to the size and order bounds.
pub fn mark(phi: &DgField, cfg: &AdaptConfig) -> Vec<CellAction> {
    let space = phi.space();
    let mesh = space.mesh();
    let max_level = cfg.max_level(mesh);
    let min_level = cfg.min_level(mesh);
    (0..space.num_cells())
        .map(|c| {
            let eta = indicator(phi, c, cfg.direction);
            let (refine, coarsen, lower) = match cfg.direction {
                MarkingDirection::BulkRefining => (
                    eta < cfg.h_refine_threshold,
                    eta > cfg.h_coarsen_threshold,
                    eta > cfg.p_coarsen_threshold,
                ),
                MarkingDirection::InterfaceRefining => (
                    eta > INDICATOR_MAX - cfg.h_refine_threshold,
                    eta < INDICATOR_MAX - cfg.h_coarsen_threshold,
                    eta < INDICATOR_MAX - cfg.p_coarsen_threshold,
                ),
            };
            let cell = mesh.cell(c);
            let p = cell.order;
            let h = if refine && cell.level < max_level {
                HMark::Refine
            } else if coarsen && !refine && cell.level > min_level {
                HMark::Coarsen
            } else {
                HMark::Keep
            };
            let p = if refine && p < cfg.p_max {
                PMark::Raise
            } else if lower && !refine && p > cfg.p_min {
                PMark::Lower
            } else {
                PMark::Keep
            };
            CellAction { h, p }
        })
        .collect()
}

/// Marks and adapts the mesh of `phi`; `None` if nothing would change.
pub fn adapt_mesh(phi: &DgField, cfg: &AdaptConfig) -> Result<Option<Adapted>> {
    cfg.validate()?;
    let marks = mark(phi, cfg);
    if marks.iter().all(|m| *m == CellAction::KEEP) {
        return Ok(None);
    }
    let mesh = phi.space().mesh();
    let adapted = mesh.adapt(&marks, cfg.limits(mesh))?;
    let unchanged = adapted.mesh.num_cells() == mesh.num_cells()
        && adapted
            .origin
            .iter()
            .enumerate()
            .all(|(i, o)| *o == CellOrigin::Kept(i) && adapted.mesh.cell(i).order == mesh.cell(i).order);
    Ok((!unchanged).then_some(adapted))
}

/// Moves `field` onto `target`, whose cells descend from the field's mesh as
/// described by `origin`.
pub fn transfer(field: &DgField, target: &Arc<DgSpace>, origin: &[CellOrigin]) -> Result<DgField> {
    if origin.len() != target.num_cells() {
        return Err(Error::MeshMismatch);
    }
    let source = field.space();
    let dim = target.dim();
    let mut out = DgField::zeros(target);
    for (c, o) in origin.iter().enumerate() {
        let p_new = target.order(c);
        match o {
            CellOrigin::Kept(old) => {
                let p_old = source.order(*old);
                let src = field.cell_coeffs(*old);
                for (i, v) in out.cell_coeffs_mut(c).iter_mut().enumerate() {
                    let a = mode_degrees(i, p_new, dim);
                    *v = mode_index(&a, p_old, dim).map_or(0.0, |j| src[j]);
                }
            }
            CellOrigin::Refined { parent, .. } => {
                let coeffs = project_piece(field, *parent, target.cell_map(c), target.cell_map(c), p_new, dim);
                out.cell_coeffs_mut(c).copy_from_slice(&coeffs);
            }
            CellOrigin::Coarsened { children } => {
                let mut acc = vec![0.0; out.cell_coeffs(c).len()];
                for &child in children {
                    let part = project_piece(field, child, source.cell_map(child), target.cell_map(c), p_new, dim);
                    for (a, b) in acc.iter_mut().zip(&part) {
                        *a += b;
                    }
                }
                out.cell_coeffs_mut(c).copy_from_slice(&acc);
            }
        }
    }
    Ok(out)
}

/// `int_D f psi_i` for the degree-`p` modes `psi_i` of the cell mapped by
/// `target`, where `f` is `field` on `src_cell` and `D` the cell mapped by `domain`.
fn project_piece(field: &DgField, src_cell: usize, domain: &CellMap, target: &CellMap, p: usize, dim: usize) -> Vec<f64> {
    let p_src = field.space().order(src_cell);
    let rule = GaussRule::new((p + p_src) / 2 + 1);
    let (ref_pts, ref_w) = tensor_rule(&rule, dim);
    let phys: Vec<_> = ref_pts.iter().map(|r| domain.to_physical(r, dim)).collect();
    let target_ref: Vec<[f64; 3]> = phys.iter().map(|x| target.to_reference(x, dim)).collect();
    let tab = Tabulation::new(p, dim, &target_ref);
    let mut out = vec![0.0; tab.n_modes];
    for (q, x) in phys.iter().enumerate() {
        let w = ref_w[q] * domain.jacobian * target.scale * field.eval(src_cell, x);
        for (i, o) in out.iter_mut().enumerate() {
            *o += w * tab.val(q, i);
        }
    }
    out
}

/// One adapt cycle of a time level: marks on `phi`, transfers both fields
/// and limits `phi`. `None` if the mesh is unchanged.
pub fn adapt_state(state: &ChState, cfg: &AdaptConfig) -> Result<Option<ChState>> {
    let Some(adapted) = adapt_mesh(&state.phi, cfg)? else {
        return Ok(None);
    };
    let space = DgSpace::from_mesh(adapted.mesh);
    let mut phi = transfer(&state.phi, &space, &adapted.origin)?;
    let upsilon = transfer(&state.upsilon, &space, &adapted.origin)?;
    limit_in_place(&mut phi)?;
    Ok(Some(ChState {
        phi,
        upsilon,
        time: state.time,
        step: state.step,
    }))
}
