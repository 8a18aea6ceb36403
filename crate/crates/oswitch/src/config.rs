//! Run configuration: one JSON document drives every workflow.
//!
//! Problem and diffusion sections are mandatory; everything else has a
//! documented default. Expression strings share the grammar of the
//! expression module. Unknown fields are rejected so typos fail loudly,
//! and the canonical re-serialization is hashed into every artifact so
//! downstream commands can refuse mismatched inputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{Expr, VarDims};
use crate::grid::BoundaryPolicy;
use crate::model::{
    Coupling, DiffusionSpec, GeneratorSpec, ModelError, SwitchingProblem,
};
use crate::qvi::SolverConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field {field}: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// Mode labels; the number of modes is their count.
    pub modes: Vec<String>,
    pub discount: f64,
    /// One generator per mode.
    pub generators: Vec<GeneratorEntry>,
    /// m x m matrix of cost expressions over x1..xk; diagonal must be "0".
    pub costs: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEntry {
    pub expr: String,
    #[serde(default = "default_coupling")]
    pub coupling: Coupling,
}

fn default_coupling() -> Coupling {
    Coupling::StateOnly
}

impl<'de> Deserialize<'de> for Coupling {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "state_only" => Ok(Coupling::StateOnly),
            "own_component" => Ok(Coupling::OwnComponent),
            "fully_coupled" => Ok(Coupling::FullyCoupled),
            other => Err(serde::de::Error::custom(format!(
                "unknown coupling '{other}' (expected state_only, own_component or fully_coupled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSection {
    Constant {
        drift: Vec<f64>,
        diffusion: Vec<Vec<f64>>,
    },
    Affine {
        rate: Vec<f64>,
        level: Vec<f64>,
        diffusion: Vec<Vec<f64>>,
    },
    Geometric {
        rate: Vec<f64>,
        vol: Vec<Vec<f64>>,
    },
    Custom {
        drift: Vec<String>,
        diffusion: Vec<Vec<String>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// [lo, hi] per axis; when absent a box is centered on the first test
    /// point with half-width 5 (1 + |x0|).
    #[serde(default)]
    pub bounds: Option<Vec<[f64; 2]>>,
    /// Cells per axis.
    #[serde(default = "default_cells")]
    pub cells: Vec<usize>,
    #[serde(default = "default_boundary")]
    pub boundary: BoundaryPolicy,
}

fn default_cells() -> Vec<usize> {
    vec![128]
}

fn default_boundary() -> BoundaryPolicy {
    BoundaryPolicy::DirichletEnvelope
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            bounds: None,
            cells: default_cells(),
            boundary: default_boundary(),
        }
    }
}

impl<'de> Deserialize<'de> for BoundaryPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "dirichlet_envelope" => Ok(BoundaryPolicy::DirichletEnvelope),
            "neumann_zero" => Ok(BoundaryPolicy::NeumannZero),
            other => Err(serde::de::Error::custom(format!(
                "unknown boundary policy '{other}' (expected dirichlet_envelope or neumann_zero)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPoint {
    pub x: Vec<f64>,
    /// 1-based mode index.
    pub mode: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub dt: f64,
    /// Simulation horizon; when absent it is chosen so that
    /// e^{-rT} (1 + |x0|) drops below 1e-4.
    pub horizon: Option<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub test_points: Vec<TestPoint>,
    /// Discretization allowance of the probabilistic check.
    pub eps_disc: f64,
    /// Binding tolerance for policy extraction.
    pub eps_bind: f64,
    pub max_switches: usize,
    /// Paths used by the validation-stage discount check.
    pub validation_paths: usize,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            dt: 1e-3,
            horizon: None,
            n_paths: 10_000,
            seed: 42,
            test_points: Vec::new(),
            eps_disc: 0.01,
            eps_bind: 1e-5,
            max_switches: 1000,
            validation_paths: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub write_paths: bool,
    pub write_switch_log: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            write_paths: false,
            write_switch_log: false,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &str) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        RunConfig::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate_shape()?;
        Ok(config)
    }

    fn validate_shape(&self) -> Result<(), ConfigError> {
        let m = self.problem.modes.len();
        if m == 0 {
            return Err(field_err("problem.modes", "at least one mode required"));
        }
        if self.problem.generators.len() != m {
            return Err(field_err(
                "problem.generators",
                format!("expected {m} generators, got {}", self.problem.generators.len()),
            ));
        }
        if self.problem.costs.len() != m
            || self.problem.costs.iter().any(|row| row.len() != m)
        {
            return Err(field_err("problem.costs", format!("expected an {m}x{m} matrix")));
        }
        if !(self.solver.damping >= 0.0 && self.solver.damping < 1.0) {
            return Err(field_err("solver.damping", "must lie in [0, 1)"));
        }
        if !(self.solver.tol_outer > 0.0 && self.solver.tol_inner > 0.0) {
            return Err(field_err("solver", "tolerances must be positive"));
        }
        Ok(())
    }

    /// Hash of the canonical re-serialization; embedded in every artifact.
    pub fn canonical_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&bytes)
    }

    /// State dimension implied by the diffusion section.
    pub fn dim_state(&self) -> usize {
        match &self.diffusion {
            DiffusionSection::Constant { drift, .. } => drift.len(),
            DiffusionSection::Affine { rate, .. } => rate.len(),
            DiffusionSection::Geometric { rate, .. } => rate.len(),
            DiffusionSection::Custom { drift, .. } => drift.len(),
        }
    }

    pub fn dim_noise(&self) -> usize {
        match &self.diffusion {
            DiffusionSection::Constant { diffusion, .. }
            | DiffusionSection::Affine { diffusion, .. } => {
                diffusion.first().map(|r| r.len()).unwrap_or(0)
            }
            DiffusionSection::Geometric { vol, .. } => {
                vol.first().map(|r| r.len()).unwrap_or(0)
            }
            DiffusionSection::Custom { diffusion, .. } => {
                diffusion.first().map(|r| r.len()).unwrap_or(0)
            }
        }
    }

    pub fn build_diffusion(&self) -> Result<DiffusionSpec, ConfigError> {
        let k = self.dim_state();
        let spec = match &self.diffusion {
            DiffusionSection::Constant { drift, diffusion } => {
                DiffusionSpec::constant(drift.clone(), diffusion.clone())?
            }
            DiffusionSection::Affine { rate, level, diffusion } => {
                DiffusionSpec::affine(rate.clone(), level.clone(), diffusion.clone())?
            }
            DiffusionSection::Geometric { rate, vol } => {
                DiffusionSpec::geometric(rate.clone(), vol.clone())?
            }
            DiffusionSection::Custom { drift, diffusion } => {
                let dims = VarDims::state_only(k);
                let drift_exprs = drift
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Expr::parse(s, dims).map_err(|e| {
                            field_err(&format!("diffusion.drift[{i}]"), e.to_string())
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let diff_exprs = diffusion
                    .iter()
                    .enumerate()
                    .map(|(i, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(j, s)| {
                                Expr::parse(s, dims).map_err(|e| {
                                    field_err(
                                        &format!("diffusion.diffusion[{i}][{j}]"),
                                        e.to_string(),
                                    )
                                })
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                DiffusionSpec::custom(drift_exprs, diff_exprs)?
            }
        };
        Ok(spec)
    }

    pub fn build_problem(&self) -> Result<SwitchingProblem, ConfigError> {
        let k = self.dim_state();
        let d = self.dim_noise();
        let m = self.problem.modes.len();
        let dims = VarDims {
            state: k,
            value: m,
            gradient: d,
        };
        let generators = self
            .problem
            .generators
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                let expr = Expr::parse(&entry.expr, dims).map_err(|e| {
                    field_err(&format!("problem.generators[{i}].expr"), e.to_string())
                })?;
                Ok(GeneratorSpec {
                    expr,
                    coupling: entry.coupling,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let costs = self
            .problem
            .costs
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, s)| {
                        Expr::parse(s, VarDims::state_only(k)).map_err(|e| {
                            field_err(&format!("problem.costs[{i}][{j}]"), e.to_string())
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SwitchingProblem::new(
            self.problem.modes.clone(),
            generators,
            costs,
            self.problem.discount,
            k,
            d,
        )?)
    }

    /// Grid bounds: explicit, or centered on the first test point.
    pub fn grid_bounds(&self) -> Vec<(f64, f64)> {
        if let Some(b) = &self.grid.bounds {
            return b.iter().map(|[lo, hi]| (*lo, *hi)).collect();
        }
        let k = self.dim_state();
        let center = self
            .mc
            .test_points
            .first()
            .map(|p| p.x.clone())
            .unwrap_or_else(|| vec![0.0; k]);
        center
            .iter()
            .map(|c| {
                let half = 5.0 * (1.0 + c.abs());
                (c - half, c + half)
            })
            .collect()
    }

    /// Simulation horizon: explicit, or long enough that the discounted
    /// polynomial tail drops below 1e-4.
    pub fn mc_horizon(&self) -> f64 {
        if let Some(t) = self.mc.horizon {
            return t;
        }
        let r = self.problem.discount;
        let x0_norm = self
            .mc
            .test_points
            .first()
            .map(|p| p.x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0);
        (((1.0 + x0_norm) / 1e-4).ln() / r).max(1.0)
    }

    /// Zero-based test points.
    pub fn test_points(&self) -> Result<Vec<(Vec<f64>, usize)>, ConfigError> {
        let m = self.problem.modes.len();
        self.mc
            .test_points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.mode == 0 || p.mode > m {
                    Err(field_err(
                        &format!("mc.test_points[{i}].mode"),
                        format!("mode must be in 1..={m}"),
                    ))
                } else {
                    Ok((p.x.clone(), p.mode - 1))
                }
            })
            .collect()
    }
}
