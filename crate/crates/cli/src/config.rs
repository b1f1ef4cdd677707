//! Run configuration: experiment presets, JSON documents and `--set`
//! overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chdg::adaptivity::AdaptConfig;
use chdg::forms::{PhysicalParams, SchemeVariant, MOBILITY_FLOOR};
use chdg::problems::{trig2d_dt, trig3d_dt, Droplet, Trig3dDtRule};
use chdg::solver::LinearSolverConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Trig2d,
    Trig3d,
    Droplets,
    Rotation,
    Custom,
}

impl Experiment {
    pub fn is_convergence(self) -> bool {
        matches!(self, Self::Trig2d | Self::Trig3d)
    }
}

/// How the time step follows from `N` and `p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum DtRule {
    Fixed { value: f64 },
    /// `10^{-(2+p)} 2^{-(N-32)/32}`
    Trig2d,
    /// `10^{-3} 2^{-(N-8)/8}`
    Trig3dPerEight,
    /// `10^{-3} 2^{-N/16}`
    Trig3dPerSixteen,
}

impl DtRule {
    pub fn resolve(self, n: usize, p: usize) -> Result<f64> {
        let dt = match self {
            Self::Fixed { value } => value,
            Self::Trig2d => trig2d_dt(p, n),
            Self::Trig3dPerEight => trig3d_dt(Trig3dDtRule::PerEight, n),
            Self::Trig3dPerSixteen => trig3d_dt(Trig3dDtRule::PerSixteen, n),
        };
        if !(dt > 0.0 && dt.is_finite()) {
            bail!("time step rule {self:?} gives {dt} for N = {n}, p = {p}");
        }
        Ok(dt)
    }
}

/// Physical constants. `cn`, `pe` and `we` left empty follow the experiment:
/// `Cn = 4 h_min`, `Pe^{-1} = 3 Cn`, `We = 1 / Cn`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    pub cn: Option<f64>,
    pub pe: Option<f64>,
    pub delta: f64,
    pub beta: f64,
    /// Amplitude `A` of the trigonometric solution.
    pub amplitude: f64,
    /// Swirl strength; 0 disables advection.
    pub chi: f64,
    pub we: Option<f64>,
    pub rho1: f64,
    pub rho2: f64,
    /// Include the interface prefactor `1/(We Cn)` and kinetic term in the energy.
    pub coupled_energy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// Cells per axis of each convergence run.
    pub n: Vec<usize>,
    /// Cells per axis of the base mesh of a droplet run.
    pub base_n: usize,
    /// Order of uniform runs and of the base mesh.
    pub p: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropletSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Initial data of the `custom` experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomProfile {
    pub domain: Domain,
    pub droplets: Vec<DropletSpec>,
    pub bulk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Steps between VTK snapshots; 0 writes none.
    pub vtk_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub trace_samples: usize,
    pub coercivity_trials: usize,
    pub limiter_samples: usize,
    pub symmetry_trials: usize,
    /// Penalty scale of the under-penalized control run.
    pub negative_control_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub variant: SchemeVariant,
    /// Variants swept by `converge`; empty means `variant` only.
    pub variants: Vec<SchemeVariant>,
    pub physics: Physics,
    pub mesh: MeshConfig,
    pub dt: DtRule,
    pub final_time: f64,
    pub nonlinear_tol: f64,
    pub max_nonlinear_iters: usize,
    pub max_dt_halvings: usize,
    pub linear: LinearSolverConfig,
    pub adapt: Option<AdaptConfig>,
    pub custom: Option<CustomProfile>,
    pub output: OutputConfig,
    pub verify: VerifyConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn preset(experiment: Experiment) -> Self {
        let mut cfg = Self {
            experiment,
            variant: SchemeVariant::SwipdL,
            variants: Vec::new(),
            physics: Physics {
                cn: None,
                pe: None,
                delta: MOBILITY_FLOOR,
                beta: 3.0,
                amplitude: 0.1,
                chi: 0.0,
                we: None,
                rho1: 100.0,
                rho2: 1.0,
                coupled_energy: false,
            },
            mesh: MeshConfig {
                n: Vec::new(),
                base_n: 128,
                p: 1,
            },
            dt: DtRule::Fixed { value: 1e-3 },
            final_time: 0.4,
            nonlinear_tol: 1e-12,
            max_nonlinear_iters: 30,
            max_dt_halvings: 0,
            linear: LinearSolverConfig::default(),
            adapt: Some(AdaptConfig::default()),
            custom: None,
            output: OutputConfig {
                dir: PathBuf::from("out"),
                vtk_every: 0,
            },
            verify: VerifyConfig {
                trace_samples: 500,
                coercivity_trials: 20,
                limiter_samples: 1000,
                symmetry_trials: 10,
                negative_control_scale: 0.01,
            },
            seed: 1,
        };
        match experiment {
            Experiment::Trig2d => {
                cfg.variant = SchemeVariant::SipgL;
                cfg.physics.cn = Some(0.1);
                cfg.physics.pe = Some(0.3);
                cfg.physics.beta = 5.0;
                cfg.mesh.n = vec![32, 64, 128];
                cfg.dt = DtRule::Trig2d;
                cfg.final_time = 0.01;
                cfg.adapt = None;
            }
            Experiment::Trig3d => {
                cfg.physics.cn = Some(0.1);
                cfg.physics.pe = Some(0.3);
                cfg.physics.beta = 5.0;
                cfg.mesh.n = vec![8, 16];
                cfg.dt = DtRule::Trig3dPerEight;
                cfg.final_time = 0.01;
                cfg.adapt = None;
            }
            Experiment::Droplets => {}
            Experiment::Rotation => {
                cfg.physics.chi = 100.0;
                cfg.physics.coupled_energy = true;
                cfg.dt = DtRule::Fixed { value: 5e-4 };
                cfg.final_time = 0.2;
            }
            Experiment::Custom => {
                cfg.custom = Some(CustomProfile {
                    domain: Domain {
                        lower: vec![0.0, 0.0],
                        upper: vec![1.0, 1.0],
                    },
                    droplets: vec![DropletSpec {
                        center: [0.5, 0.5],
                        radius: 0.25,
                    }],
                    bulk: 0.995,
                });
            }
        }
        cfg
    }

    /// Reads `path`, lays it over the preset of its experiment and applies
    /// `key=value` overrides with dotted keys.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut patch = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        if !patch.is_object() {
            bail!("configuration must be a JSON object");
        }
        for o in overrides {
            apply_override(&mut patch, o)?;
        }
        let experiment: Experiment = match patch.get("experiment") {
            Some(v) => serde_json::from_value(v.clone()).context("experiment")?,
            None => bail!("configuration does not name an experiment"),
        };
        let mut merged = serde_json::to_value(Self::preset(experiment))?;
        merge(&mut merged, patch);
        let cfg: Self = serde_json::from_value(merged).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_time >= 0.0) {
            bail!("final_time must be non-negative");
        }
        if !(self.nonlinear_tol > 0.0) {
            bail!("nonlinear_tol must be positive");
        }
        if self.experiment.is_convergence() {
            if self.mesh.n.is_empty() {
                bail!("mesh.n must list at least one resolution");
            }
            for &n in &self.mesh.n {
                if n == 0 {
                    bail!("mesh.n entries must be positive");
                }
                self.dt.resolve(n, self.mesh.p)?;
            }
        } else {
            if self.mesh.base_n == 0 {
                bail!("mesh.base_n must be positive");
            }
            self.dt.resolve(self.mesh.base_n, self.mesh.p)?;
            if let Some(a) = &self.adapt {
                a.validate()?;
            }
        }
        if self.experiment == Experiment::Custom {
            let c = self.custom.as_ref().ok_or_else(|| anyhow!("custom experiment needs a custom profile"))?;
            if c.domain.lower.len() != 2 || c.domain.upper.len() != 2 {
                bail!("custom domain must be two-dimensional");
            }
        }
        self.params()?.validate()?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.experiment {
            Experiment::Trig3d => 3,
            _ => 2,
        }
    }

    /// Smallest cell width, used for `Cn = 4 h_min`.
    pub fn h_min(&self) -> f64 {
        match &self.adapt {
            Some(a) => a.h_min,
            None => self.domain_extent() / self.mesh.base_n as f64,
        }
    }

    fn domain_extent(&self) -> f64 {
        match self.experiment {
            Experiment::Custom => self
                .custom
                .as_ref()
                .map(|c| c.domain.upper[0] - c.domain.lower[0])
                .unwrap_or(1.0),
            _ => 1.0,
        }
    }

    pub fn cn(&self) -> f64 {
        self.physics.cn.unwrap_or(4.0 * self.h_min())
    }

    pub fn params(&self) -> Result<PhysicalParams> {
        let cn = self.cn();
        let pe = self.physics.pe.unwrap_or(1.0 / (3.0 * cn));
        Ok(PhysicalParams::new(cn, pe, self.physics.delta, self.physics.beta, self.dim())?)
    }

    pub fn weber(&self) -> f64 {
        self.physics.we.unwrap_or(1.0 / self.cn())
    }

    pub fn sweep_variants(&self) -> Vec<SchemeVariant> {
        if self.variants.is_empty() {
            vec![self.variant]
        } else {
            self.variants.clone()
        }
    }

    pub fn droplets(&self) -> Vec<Droplet> {
        self.custom
            .as_ref()
            .map(|c| {
                c.droplets
                    .iter()
                    .map(|d| Droplet {
                        center: d.center,
                        radius: d.radius,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{assignment}' is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("override key '{key}' has an empty component");
        }
        let obj = match node {
            Value::Object(m) => m,
            other => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just created")
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Recursive object merge; `patch` wins, `null` in `patch` clears.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
