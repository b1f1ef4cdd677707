//! The mobility form `b`, the Laplacian form `a`, the upwind advection form
//! `c`, the scalar nonlinearities and the manufactured forcing.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dgspace::basis::{legendre_1d, mode_degrees, MAX_ORDER};
use crate::dgspace::quadrature::GaussRule;
use crate::dgspace::{harmonic_average, penalty_base, DgField, DgSpace, FaceQuad};
use crate::error::{Error, Result};
use crate::linalg::BlockCsr;
use crate::mesh::{Point, MAX_DIM};

/// Prescribed velocity `u(x, t)`.
pub type VelocityField = Arc<dyn Fn(&Point, f64) -> Point + Send + Sync>;

/// Consistency flux of the mobility form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyFlux {
    /// `{M grad v . n}`
    Arithmetic,
    /// `{M}_H {grad v . n}`
    Harmonic,
}

/// Face mobility `M~` entering the penalty weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyMobility {
    Maximum,
    Harmonic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SchemeVariant {
    SipgL,
    SwipL,
    SipgdL,
    SwipdL,
}

impl SchemeVariant {
    pub const ALL: [SchemeVariant; 4] = [Self::SipgL, Self::SwipL, Self::SipgdL, Self::SwipdL];

    pub fn name(self) -> &'static str {
        match self {
            Self::SipgL => "SIPG-L",
            Self::SwipL => "SWIP-L",
            Self::SipgdL => "SIPGD-L",
            Self::SwipdL => "SWIPD-L",
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            Self::SipgL | Self::SwipL => 0.0,
            Self::SipgdL | Self::SwipdL => 0.5,
        }
    }

    pub fn flux(self) -> ConsistencyFlux {
        match self {
            Self::SipgL | Self::SipgdL => ConsistencyFlux::Arithmetic,
            Self::SwipL | Self::SwipdL => ConsistencyFlux::Harmonic,
        }
    }

    pub fn penalty_mobility(self) -> PenaltyMobility {
        match self {
            Self::SipgL | Self::SipgdL => PenaltyMobility::Maximum,
            Self::SwipL | Self::SwipdL => PenaltyMobility::Harmonic,
        }
    }
}

impl fmt::Display for SchemeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for SchemeVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for SchemeVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for SchemeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_uppercase();
        match key.as_str() {
            "SIPGL" => Ok(Self::SipgL),
            "SWIPL" => Ok(Self::SwipL),
            "SIPGDL" => Ok(Self::SipgdL),
            "SWIPDL" => Ok(Self::SwipdL),
            _ => Err(Error::InvalidInput(format!("unknown scheme variant '{s}'"))),
        }
    }
}

/// Material and discretization constants.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhysicalParams {
    /// Cahn number.
    pub cn: f64,
    /// Peclet number.
    pub pe: f64,
    /// Mobility floor.
    pub delta: f64,
    /// Lumped penalty constant.
    pub beta: f64,
    pub dim: usize,
}

impl PhysicalParams {
    pub fn new(cn: f64, pe: f64, delta: f64, beta: f64, dim: usize) -> Result<Self> {
        let p = Self {
            cn,
            pe,
            delta,
            beta,
            dim,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cn > 0.0 && self.pe > 0.0 && self.delta >= 0.0 && self.beta >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "need Cn > 0, Pe > 0, delta >= 0, beta >= 1 (got {self:?})"
            )));
        }
        if !(2..=3).contains(&self.dim) {
            return Err(Error::InvalidInput(format!("dimension must be 2 or 3, got {}", self.dim)));
        }
        Ok(())
    }

    pub fn pe_inv(&self) -> f64 {
        1.0 / self.pe
    }
}

/// Default mobility floor.
pub const MOBILITY_FLOOR: f64 = 1e-20;

/// `M(phi) = max{1 - phi^2, delta}`
#[inline]
pub fn mobility(phi: f64, delta: f64) -> f64 {
    (1.0 - phi * phi).max(delta)
}

/// `W(phi) = (1 - phi^2)^2 / 4`
#[inline]
pub fn double_well(phi: f64) -> f64 {
    0.25 * (1.0 - phi * phi).powi(2)
}

#[inline]
pub fn double_well_prime(phi: f64) -> f64 {
    phi * phi * phi - phi
}

/// Convex part of `W'`, treated implicitly.
#[inline]
pub fn eyre_plus(phi: f64) -> f64 {
    phi * phi * phi
}

/// Concave part of `W'`, treated explicitly.
#[inline]
pub fn eyre_minus(phi: f64) -> f64 {
    -phi
}

/// `eta_base * beta * M~^{2 alpha}`; divide by `h_e` for the face coefficient.
pub fn penalty_weight(variant: SchemeVariant, m_minus: f64, m_plus: f64, eta_base: f64, beta: f64) -> f64 {
    let alpha = variant.alpha();
    if alpha == 0.0 {
        return eta_base * beta;
    }
    let m = match variant.penalty_mobility() {
        PenaltyMobility::Maximum => m_minus.max(m_plus),
        PenaltyMobility::Harmonic => harmonic_average(m_minus, m_plus),
    };
    eta_base * beta * m.powf(2.0 * alpha)
}

/// Per-point face coefficients of a symmetric interior-penalty form:
/// `sigma [[u]][[v]] - (w- du-/dn + w+ du+/dn)[[v]] - (same with u, v swapped)`.
struct FaceCoefficients {
    sigma: Vec<f64>,
    w_minus: Vec<f64>,
    w_plus: Vec<f64>,
}

/// Assembles the forms on a fixed space, reusing the block sparsity pattern.
pub struct FormAssembler {
    space: Arc<DgSpace>,
    pattern: BlockCsr,
}

impl FormAssembler {
    pub fn new(space: &Arc<DgSpace>) -> Self {
        let sizes: Vec<usize> = (0..space.num_cells()).map(|c| space.cell_dofs(c).len()).collect();
        let pattern = BlockCsr::new(sizes, &space.mesh().adjacency());
        Self {
            space: space.clone(),
            pattern,
        }
    }

    pub fn space(&self) -> &Arc<DgSpace> {
        &self.space
    }

    pub fn pattern(&self) -> &BlockCsr {
        &self.pattern
    }

    /// Laplacian form `a` with penalty `beta eta_e / h_e`.
    pub fn laplacian(&self, params: &PhysicalParams) -> BlockCsr {
        let dim = self.space.dim();
        self.symmetric_ip(
            |_| None,
            |fid, fq| {
                let eta = self.face_eta(fid, dim);
                let h = self.space.face(fid).width;
                let nq = fq.points.len();
                FaceCoefficients {
                    sigma: vec![params.beta * eta / h; nq],
                    w_minus: vec![0.5; nq],
                    w_plus: vec![0.5; nq],
                }
            },
        )
    }

    /// Mobility form `b(M(phi); ., .)` as a matrix in its second argument.
    pub fn mobility(&self, variant: SchemeVariant, params: &PhysicalParams, phi: &DgField) -> Result<BlockCsr> {
        self.mobility_scaled(variant, params, phi, 1.0)
    }

    /// [`Self::mobility`] with every face penalty multiplied by `penalty_scale`.
    pub fn mobility_scaled(
        &self,
        variant: SchemeVariant,
        params: &PhysicalParams,
        phi: &DgField,
        penalty_scale: f64,
    ) -> Result<BlockCsr> {
        if !phi.space().same_mesh(&self.space) {
            return Err(Error::MeshMismatch);
        }
        let dim = self.space.dim();
        Ok(self.symmetric_ip(
            |c| Some(phi.volume_values(c).into_iter().map(|v| mobility(v, params.delta)).collect()),
            |fid, fq| {
                let eta = self.face_eta(fid, dim);
                let h = self.space.face(fid).width;
                let plus = fq.plus.as_ref().expect("interior face");
                let vm = side_values(&fq.minus, phi.cell_coeffs(fq.minus.cell));
                let vp = side_values(plus, phi.cell_coeffs(plus.cell));
                let nq = fq.points.len();
                let mut out = FaceCoefficients {
                    sigma: vec![0.0; nq],
                    w_minus: vec![0.0; nq],
                    w_plus: vec![0.0; nq],
                };
                for q in 0..nq {
                    let mm = mobility(vm[q], params.delta);
                    let mp = mobility(vp[q], params.delta);
                    out.sigma[q] = penalty_scale * penalty_weight(variant, mm, mp, eta, params.beta) / h;
                    match variant.flux() {
                        ConsistencyFlux::Arithmetic => {
                            out.w_minus[q] = 0.5 * mm;
                            out.w_plus[q] = 0.5 * mp;
                        }
                        ConsistencyFlux::Harmonic => {
                            let mh = harmonic_average(mm, mp);
                            out.w_minus[q] = 0.5 * mh;
                            out.w_plus[q] = 0.5 * mh;
                        }
                    }
                }
                out
            },
        ))
    }

    /// Semi-norm Gram matrix `||sqrt(M) grad v||^2 + sum_e int (Lambda_e eta_e / h_e) [[v]]^2`.
    pub fn mobility_seminorm(&self, variant: SchemeVariant, params: &PhysicalParams, phi: &DgField) -> BlockCsr {
        self.mobility_seminorm_scaled(variant, params, phi, 1.0)
    }

    pub fn mobility_seminorm_scaled(
        &self,
        variant: SchemeVariant,
        params: &PhysicalParams,
        phi: &DgField,
        penalty_scale: f64,
    ) -> BlockCsr {
        let dim = self.space.dim();
        self.symmetric_ip(
            |c| Some(phi.volume_values(c).into_iter().map(|v| mobility(v, params.delta)).collect()),
            |fid, fq| {
                let eta = self.face_eta(fid, dim);
                let h = self.space.face(fid).width;
                let plus = fq.plus.as_ref().expect("interior face");
                let vm = side_values(&fq.minus, phi.cell_coeffs(fq.minus.cell));
                let vp = side_values(plus, phi.cell_coeffs(plus.cell));
                let nq = fq.points.len();
                FaceCoefficients {
                    sigma: (0..nq)
                        .map(|q| {
                            let mm = mobility(vm[q], params.delta);
                            let mp = mobility(vp[q], params.delta);
                            penalty_scale * penalty_weight(variant, mm, mp, eta, params.beta) / h
                        })
                        .collect(),
                    w_minus: vec![0.0; nq],
                    w_plus: vec![0.0; nq],
                }
            },
        )
    }

    fn face_eta(&self, fid: usize, dim: usize) -> f64 {
        let (m, p) = self.space.face(fid).sides();
        penalty_base(self.space.order(m), self.space.order(p), dim)
    }

    fn symmetric_ip(
        &self,
        volume_coef: impl Fn(usize) -> Option<Vec<f64>>,
        face_coef: impl Fn(usize, &FaceQuad) -> FaceCoefficients,
    ) -> BlockCsr {
        let space = &self.space;
        let dim = space.dim();
        let mut mat = self.pattern.zeros_like();
        let mut block = Vec::new();
        let mut weighted = Vec::new();
        for c in 0..space.num_cells() {
            let rule = space.cell_rule(c);
            let map = space.cell_map(c);
            let n = rule.tab.n_modes;
            let nq = rule.points.len();
            let coef = volume_coef(c);
            let mut axis_scale = [0.0; MAX_DIM];
            for (k, s) in axis_scale.iter_mut().enumerate().take(dim) {
                *s = (map.scale * map.inv_half[k]).powi(2) * map.jacobian;
            }
            // weighted[(q*dim + k)*n + i] = w_q k_q s_k G_qik
            weighted.resize(nq * dim * n, 0.0);
            for q in 0..nq {
                let wq = rule.weights[q] * coef.as_ref().map_or(1.0, |v| v[q]);
                for k in 0..dim {
                    let f = wq * axis_scale[k];
                    for i in 0..n {
                        weighted[(q * dim + k) * n + i] = f * rule.tab.grads[(q * n + i) * dim + k];
                    }
                }
            }
            block.clear();
            block.resize(n * n, 0.0);
            for q in 0..nq {
                for k in 0..dim {
                    let wrow = &weighted[(q * dim + k) * n..(q * dim + k + 1) * n];
                    for j in 0..n {
                        let g = rule.tab.grads[(q * n + j) * dim + k];
                        if g == 0.0 {
                            continue;
                        }
                        for (i, wi) in wrow.iter().enumerate() {
                            block[i * n + j] += wi * g;
                        }
                    }
                }
            }
            mat.add_block(c, c, &block, 1.0);
        }
        for (fid, face) in space.mesh().faces().iter().enumerate() {
            if !face.is_interior() {
                continue;
            }
            let fq = space.face_quad(fid);
            let coef = face_coef(fid, fq);
            let plus = fq.plus.as_ref().expect("interior face");
            let sides = [(&fq.minus, 1.0, &coef.w_minus), (plus, -1.0, &coef.w_plus)];
            for (ss, sgn_s, w_s) in &sides {
                for (tt, sgn_t, w_t) in &sides {
                    let ns = ss.n_modes;
                    let nt = tt.n_modes;
                    block.clear();
                    block.resize(ns * nt, 0.0);
                    for q in 0..fq.points.len() {
                        let w = fq.weights[q];
                        let pen = w * coef.sigma[q] * sgn_s * sgn_t;
                        let ft = w * w_t[q] * sgn_s;
                        let fs = w * w_s[q] * sgn_t;
                        let vs = &ss.vals[q * ns..(q + 1) * ns];
                        let ds = &ss.dn[q * ns..(q + 1) * ns];
                        let vt = &tt.vals[q * nt..(q + 1) * nt];
                        let dt = &tt.dn[q * nt..(q + 1) * nt];
                        for i in 0..ns {
                            let a = pen * vs[i] - fs * ds[i];
                            let b = ft * vs[i];
                            let row = &mut block[i * nt..(i + 1) * nt];
                            for j in 0..nt {
                                row[j] += a * vt[j] - b * dt[j];
                            }
                        }
                    }
                    mat.add_block(ss.cell, tt.cell, &block, 1.0);
                }
            }
        }
        mat
    }

    /// Upwind advection form `c(u; phi, psi)`; rows are test functions.
    pub fn advection(&self, velocity: &VelocityField, time: f64) -> BlockCsr {
        let space = &self.space;
        let dim = space.dim();
        let mut mat = self.pattern.zeros_like();
        let mut block = Vec::new();
        for c in 0..space.num_cells() {
            let rule = space.cell_rule(c);
            let map = space.cell_map(c);
            let n = rule.tab.n_modes;
            block.clear();
            block.resize(n * n, 0.0);
            for (q, r) in rule.points.iter().enumerate() {
                let x = map.to_physical(r, dim);
                let u = velocity(&x, time);
                let w = rule.weights[q] * map.jacobian * map.scale * map.scale;
                for i in 0..n {
                    let mut ug = 0.0;
                    for k in 0..dim {
                        ug += u[k] * map.inv_half[k] * rule.tab.grad(q, i, k);
                    }
                    if ug == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        block[i * n + j] += w * ug * rule.tab.val(q, j);
                    }
                }
            }
            mat.add_block(c, c, &block, 1.0);
        }
        for (fid, face) in space.mesh().faces().iter().enumerate() {
            if !face.is_interior() {
                continue;
            }
            let fq = space.face_quad(fid);
            let plus = fq.plus.as_ref().expect("interior face");
            let un: Vec<f64> = fq
                .points
                .iter()
                .map(|x| {
                    let u = velocity(x, time);
                    (0..dim).map(|k| u[k] * face.normal[k]).sum()
                })
                .collect();
            let sides = [(&fq.minus, 1.0), (plus, -1.0)];
            for (ss, sgn) in &sides {
                for (t_idx, tt) in sides.iter().enumerate() {
                    let ns = ss.n_modes;
                    let nt = tt.0.n_modes;
                    block.clear();
                    block.resize(ns * nt, 0.0);
                    let mut any = false;
                    for q in 0..fq.points.len() {
                        let upw = if t_idx == 0 { un[q].max(0.0) } else { un[q].min(0.0) };
                        if upw == 0.0 {
                            continue;
                        }
                        any = true;
                        let f = -fq.weights[q] * upw * sgn;
                        for i in 0..ns {
                            let a = f * ss.vals[q * ns + i];
                            for j in 0..nt {
                                block[i * nt + j] += a * tt.0.vals[q * nt + j];
                            }
                        }
                    }
                    if any {
                        mat.add_block(ss.cell, tt.0.cell, &block, 1.0);
                    }
                }
            }
        }
        mat
    }

    /// `((phi)^3, psi_i)` for every basis function.
    pub fn cubic_load(&self, phi: &DgField) -> Vec<f64> {
        let space = &self.space;
        let mut out = vec![0.0; space.ndofs()];
        for c in 0..space.num_cells() {
            let rule = space.cell_rule(c);
            let map = space.cell_map(c);
            let n = rule.tab.n_modes;
            let vals = phi.volume_values(c);
            let off = space.offset(c);
            for q in 0..rule.points.len() {
                let f = rule.weights[q] * map.jacobian * map.scale * eyre_plus(vals[q]);
                for i in 0..n {
                    out[off + i] += f * rule.tab.val(q, i);
                }
            }
        }
        out
    }

    /// Cell blocks of `(3 phi^2 psi_j, psi_i)`.
    pub fn cubic_jacobian(&self, phi: &DgField) -> Vec<Vec<f64>> {
        let space = &self.space;
        (0..space.num_cells())
            .map(|c| {
                let rule = space.cell_rule(c);
                let map = space.cell_map(c);
                let n = rule.tab.n_modes;
                let vals = phi.volume_values(c);
                let mut block = vec![0.0; n * n];
                for q in 0..rule.points.len() {
                    let f = rule.weights[q] * map.jacobian * map.scale * map.scale * 3.0 * vals[q] * vals[q];
                    let v = &rule.tab.vals[q * n..(q + 1) * n];
                    for i in 0..n {
                        let a = f * v[i];
                        for j in 0..n {
                            block[i * n + j] += a * v[j];
                        }
                    }
                }
                block
            })
            .collect()
    }

    /// `(f, psi_i)` by volume quadrature.
    pub fn load(&self, f: &dyn Fn(&Point) -> f64) -> Vec<f64> {
        DgField::l2_project(&self.space, f).into_coeffs()
    }
}

fn side_values(side: &crate::dgspace::FaceSide, coeffs: &[f64]) -> Vec<f64> {
    let n = side.n_modes;
    (0..side.vals.len() / n)
        .map(|q| side.vals[q * n..(q + 1) * n].iter().zip(coeffs).map(|(a, b)| a * b).sum())
        .collect()
}

/// Assembled Laplacian form `a`.
pub fn assemble_a(space: &Arc<DgSpace>, params: &PhysicalParams) -> BlockCsr {
    FormAssembler::new(space).laplacian(params)
}

/// Assembled mobility form `b(M(phi); ., .)`.
pub fn assemble_b(space: &Arc<DgSpace>, variant: SchemeVariant, params: &PhysicalParams, phi: &DgField) -> Result<BlockCsr> {
    FormAssembler::new(space).mobility(variant, params, phi)
}

/// Assembled advection form `c(u(t); ., .)`.
pub fn assemble_c(space: &Arc<DgSpace>, velocity: &VelocityField, time: f64) -> BlockCsr {
    FormAssembler::new(space).advection(velocity, time)
}

fn check_same(fields: &[&DgField]) -> Result<()> {
    for f in &fields[1..] {
        if !fields[0].space().same_mesh(f.space()) || fields[0].coeffs().len() != f.coeffs().len() {
            return Err(Error::MeshMismatch);
        }
    }
    Ok(())
}

fn dot3(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Evaluates a symmetric interior-penalty form directly from field traces.
fn ip_value(
    upsilon: &DgField,
    psi: &DgField,
    volume_coef: impl Fn(usize) -> Vec<f64>,
    face_coef: impl Fn(usize, usize) -> (f64, f64, f64),
) -> f64 {
    let space = upsilon.space();
    let mut total = 0.0;
    for c in 0..space.num_cells() {
        let rule = space.cell_rule(c);
        let jac = space.cell_map(c).jacobian;
        let gu = upsilon.volume_gradients(c);
        let gp = psi.volume_gradients(c);
        let k = volume_coef(c);
        for q in 0..rule.points.len() {
            total += rule.weights[q] * jac * k[q] * dot3(&gu[q], &gp[q]);
        }
    }
    for (fid, face) in space.mesh().faces().iter().enumerate() {
        if !face.is_interior() {
            continue;
        }
        let fq = space.face_quad(fid);
        let tu = upsilon.face_traces(fid);
        let tp = psi.face_traces(fid);
        for q in 0..fq.points.len() {
            let (sigma, wm, wp) = face_coef(fid, q);
            let ju = tu.values_minus[q] - tu.values_plus[q];
            let jp = tp.values_minus[q] - tp.values_plus[q];
            let fu = wm * dot3(&tu.gradients_minus[q], &face.normal) + wp * dot3(&tu.gradients_plus[q], &face.normal);
            let fp = wm * dot3(&tp.gradients_minus[q], &face.normal) + wp * dot3(&tp.gradients_plus[q], &face.normal);
            total += fq.weights[q] * (sigma * ju * jp - fu * jp - fp * ju);
        }
    }
    total
}

/// `a(phi, xi)` evaluated from traces.
pub fn apply_a(params: &PhysicalParams, phi: &DgField, xi: &DgField) -> Result<f64> {
    check_same(&[phi, xi])?;
    let space = phi.space();
    let dim = space.dim();
    Ok(ip_value(
        phi,
        xi,
        |c| vec![1.0; space.cell_rule(c).points.len()],
        |fid, _| {
            let f = space.face(fid);
            let (m, p) = f.sides();
            let eta = penalty_base(space.order(m), space.order(p), dim);
            (params.beta * eta / f.width, 0.5, 0.5)
        },
    ))
}

/// `b(M(phi); upsilon, psi)` evaluated from traces.
pub fn apply_b(
    variant: SchemeVariant,
    params: &PhysicalParams,
    phi: &DgField,
    upsilon: &DgField,
    psi: &DgField,
) -> Result<f64> {
    check_same(&[phi, upsilon, psi])?;
    let space = phi.space();
    let dim = space.dim();
    let traces: Vec<Option<(Vec<f64>, Vec<f64>)>> = space
        .mesh()
        .faces()
        .iter()
        .enumerate()
        .map(|(fid, f)| {
            f.is_interior().then(|| {
                let t = phi.face_traces(fid);
                (t.values_minus, t.values_plus)
            })
        })
        .collect();
    Ok(ip_value(
        upsilon,
        psi,
        |c| phi.volume_values(c).into_iter().map(|v| mobility(v, params.delta)).collect(),
        |fid, q| {
            let f = space.face(fid);
            let (m, p) = f.sides();
            let eta = penalty_base(space.order(m), space.order(p), dim);
            let (vm, vp) = traces[fid].as_ref().expect("interior face");
            let mm = mobility(vm[q], params.delta);
            let mp = mobility(vp[q], params.delta);
            let sigma = penalty_weight(variant, mm, mp, eta, params.beta) / f.width;
            match variant.flux() {
                ConsistencyFlux::Arithmetic => (sigma, 0.5 * mm, 0.5 * mp),
                ConsistencyFlux::Harmonic => {
                    let mh = harmonic_average(mm, mp);
                    (sigma, 0.5 * mh, 0.5 * mh)
                }
            }
        },
    ))
}

/// `c(u(t); phi, psi)` evaluated from traces.
pub fn apply_c(velocity: &VelocityField, time: f64, phi: &DgField, psi: &DgField) -> Result<f64> {
    check_same(&[phi, psi])?;
    let space = phi.space();
    let dim = space.dim();
    let mut total = 0.0;
    for c in 0..space.num_cells() {
        let rule = space.cell_rule(c);
        let jac = space.cell_map(c).jacobian;
        let pts = space.volume_points(c);
        let v = phi.volume_values(c);
        let g = psi.volume_gradients(c);
        for q in 0..pts.len() {
            let u = velocity(&pts[q], time);
            total += rule.weights[q] * jac * dot3(&u, &g[q]) * v[q];
        }
    }
    for (fid, face) in space.mesh().faces().iter().enumerate() {
        if !face.is_interior() {
            continue;
        }
        let fq = space.face_quad(fid);
        let tf = phi.face_traces(fid);
        let tp = psi.face_traces(fid);
        for q in 0..fq.points.len() {
            let u = velocity(&fq.points[q], time);
            let un: f64 = (0..dim).map(|k| u[k] * face.normal[k]).sum();
            let upwind = un.max(0.0) * tf.values_minus[q] + un.min(0.0) * tf.values_plus[q];
            total -= fq.weights[q] * upwind * (tp.values_minus[q] - tp.values_plus[q]);
        }
    }
    Ok(total)
}

/// One-dimensional Laplacian on `n_cells` equal intervals of length `h`,
/// degree `p`, interior penalty `sigma` (already divided by `h`). Dofs are
/// numbered `cell * (p + 1) + mode`.
pub fn laplacian_1d(n_cells: usize, h: f64, p: usize, sigma: f64) -> DMatrix<f64> {
    assert!(p < MAX_ORDER);
    let m = p + 1;
    let n = n_cells * m;
    let mut a = DMatrix::zeros(n, n);
    let rule = GaussRule::new(GaussRule::volume_points(p));
    let s = (2.0 / h).sqrt();
    let d = 2.0 / h;
    let mut v = [0.0; MAX_ORDER];
    let mut g = [0.0; MAX_ORDER];
    let mut local = vec![0.0; m * m];
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        legendre_1d(p, *x, &mut v, &mut g);
        for i in 0..m {
            for j in 0..m {
                local[i * m + j] += w * (h / 2.0) * (s * d * g[i]) * (s * d * g[j]);
            }
        }
    }
    for c in 0..n_cells {
        for i in 0..m {
            for j in 0..m {
                a[(c * m + i, c * m + j)] += local[i * m + j];
            }
        }
    }
    // Traces at the right end (x = +1) of the left cell and left end of the right cell.
    let mut vr = [0.0; MAX_ORDER];
    let mut gr = [0.0; MAX_ORDER];
    let mut vl = [0.0; MAX_ORDER];
    let mut gl = [0.0; MAX_ORDER];
    legendre_1d(p, 1.0, &mut vr, &mut gr);
    legendre_1d(p, -1.0, &mut vl, &mut gl);
    for k in 0..m {
        vr[k] *= s;
        vl[k] *= s;
        gr[k] *= s * d;
        gl[k] *= s * d;
    }
    for c in 0..n_cells.saturating_sub(1) {
        let sides = [(c, &vr, &gr, 1.0), (c + 1, &vl, &gl, -1.0)];
        for (cs, vs, gs, ss) in &sides {
            for (ct, vt, gt, st) in &sides {
                for i in 0..m {
                    for j in 0..m {
                        let val = sigma * ss * st * vs[i] * vt[j] - 0.5 * gt[j] * ss * vs[i] - 0.5 * gs[i] * st * vt[j];
                        a[(cs * m + i, ct * m + j)] += val;
                    }
                }
            }
        }
    }
    a
}

/// On a uniform mesh, the one-dimensional factors of the Laplacian `a` and
/// the dof permutation into the tensor layout. `None` for non-uniform meshes.
pub fn laplacian_tensor_factors(space: &DgSpace, params: &PhysicalParams) -> Option<(Vec<DMatrix<f64>>, Vec<usize>)> {
    let mesh = space.mesh();
    if !mesh.is_uniform() {
        return None;
    }
    let dim = space.dim();
    let level = mesh.cell(0).level;
    let p = mesh.cell(0).order;
    let m = p + 1;
    let roots = mesh.roots();
    let mut factors = Vec::with_capacity(dim);
    let mut n_axis = [1usize; MAX_DIM];
    let eta = penalty_base(p, p, dim);
    let h_face = mesh.faces()[0].width;
    for k in 0..dim {
        let n = (roots[k] << level) as usize;
        n_axis[k] = n * m;
        let h = mesh.level_size(level, k);
        if (h - h_face).abs() > 1e-12 * h {
            // Anisotropic cells: h_e differs per axis, the factors would not be exact.
            return None;
        }
        factors.push(laplacian_1d(n, h, p, params.beta * eta / h));
    }
    let mut perm = vec![0; space.ndofs()];
    for c in 0..space.num_cells() {
        let cell = mesh.cell(c);
        let off = space.offset(c);
        for i in 0..space.cell_dofs(c).len() {
            let a = mode_degrees(i, p, dim);
            let mut pos = 0;
            let mut stride = 1;
            for k in 0..dim {
                pos += (cell.index[k] as usize * m + a[k]) * stride;
                stride *= n_axis[k];
            }
            perm[off + i] = pos;
        }
    }
    Some((factors, perm))
}

/// Wave number of the manufactured solution.
pub const TRIG_WAVENUMBER: f64 = 4.0 * PI;

/// `phi0(x) = A prod_i cos(4 pi x_i)` with its gradient.
pub fn trig_solution(amplitude: f64, dim: usize) -> impl Fn(&Point) -> (f64, Point) + Clone + Send + Sync {
    move |x: &Point| {
        let k = TRIG_WAVENUMBER;
        let mut c = [1.0; MAX_DIM];
        let mut s = [0.0; MAX_DIM];
        for i in 0..dim {
            c[i] = (k * x[i]).cos();
            s[i] = (k * x[i]).sin();
        }
        let v = amplitude * c[..dim].iter().product::<f64>();
        let mut g = [0.0; MAX_DIM];
        for i in 0..dim {
            let mut prod = -amplitude * k * s[i];
            for j in 0..dim {
                if j != i {
                    prod *= c[j];
                }
            }
            g[i] = prod;
        }
        (v, g)
    }
}

/// Source `S = -Pe^{-1} div(M(phi0) grad(W'(phi0) - Cn^2 lap phi0))` making
/// `phi0 = A prod cos(4 pi x_i)` stationary.
pub fn manufactured_forcing(params: &PhysicalParams, amplitude: f64) -> impl Fn(&Point) -> f64 + Clone + Send + Sync {
    let dim = params.dim;
    let k = TRIG_WAVENUMBER;
    let cn2 = params.cn * params.cn;
    let c1 = cn2 * dim as f64 * k * k - 1.0;
    let pe_inv = params.pe_inv();
    let delta = params.delta;
    let exact = trig_solution(amplitude, dim);
    move |x: &Point| {
        let (phi, grad) = exact(x);
        let grad2: f64 = grad.iter().map(|g| g * g).sum();
        let lap = -(dim as f64) * k * k * phi;
        let m = mobility(phi, delta);
        let dm = if 1.0 - phi * phi > delta { -2.0 * phi } else { 0.0 };
        let g = m * (3.0 * phi * phi + c1);
        let dg = dm * (3.0 * phi * phi + c1) + m * 6.0 * phi;
        -pe_inv * (dg * grad2 + g * lap)
    }
}
