//! JSON experiment configuration: problem selection (catalog name plus
//! overrides) and per-command numeric blocks, schema-validated with
//! field-naming error messages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::RegressionBasis;
use crate::problem::{catalog_with, ProblemOverrides, SwitchingProblem};
use crate::simulate::TimeGrid;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("field `{field}` {problem}")]
    BadField { field: &'static str, problem: String },
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
}

fn positive(field: &'static str, v: i64) -> Result<usize, ConfigError> {
    if v <= 0 {
        return Err(ConfigError::BadField {
            field,
            problem: format!("must be positive, got {v}"),
        });
    }
    Ok(v as usize)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub catalog: String,
    #[serde(default)]
    pub overrides: ProblemOverrides,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_n_steps")]
    pub n_steps: i64,
}

fn default_n_steps() -> i64 {
    50
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_steps: default_n_steps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_degree")]
    pub degree: i64,
    #[serde(default = "default_degree")]
    pub mode_degree: i64,
    #[serde(default = "default_quad_nodes")]
    pub quad_nodes: i64,
}

fn default_degree() -> i64 {
    3
}
fn default_quad_nodes() -> i64 {
    16
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            degree: default_degree(),
            mode_degree: default_degree(),
            quad_nodes: default_quad_nodes(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Penalty level for `solve`; ignored when `reflected` is set.
    pub n: Option<f64>,
    /// Ladder used by `compare`; defaults to {0,1,2,5,10,25,50}.
    pub ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub reflected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_t_steps")]
    pub t_steps: i64,
    #[serde(default = "default_x_nodes")]
    pub x_nodes: i64,
    #[serde(default)]
    pub dump_table: bool,
}

fn default_t_steps() -> i64 {
    400
}
fn default_x_nodes() -> i64 {
    1601
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            t_steps: default_t_steps(),
            x_nodes: default_x_nodes(),
            dump_table: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_paths")]
    pub paths: i64,
    /// Monte Carlo sample count for policy/control evaluation; defaults to
    /// `paths`.
    pub eval_paths: Option<i64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    /// Built-in policy name for `evaluate`.
    pub policy: Option<String>,
    /// Control spec for `randomized-eval`.
    pub control: Option<String>,
    /// "weighted" (κ-reweighted MC, default) or "direct" (thinning).
    #[serde(default = "default_estimator")]
    pub estimator: String,
    /// ε of the ε-optimal control used by `compare`.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub scenario_index: u64,
    #[serde(default)]
    pub dump_surfaces: bool,
    #[serde(default)]
    pub dump_solution: bool,
}

fn default_paths() -> i64 {
    10_000
}
fn default_seed() -> u64 {
    42
}
fn default_estimator() -> String {
    "weighted".to_string()
}
fn default_eps() -> f64 {
    0.05
}

pub const DEFAULT_LADDER: [f64; 7] = [0.0, 1.0, 2.0, 5.0, 10.0, 25.0, 50.0];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("grid.n_steps", self.grid.n_steps)?;
        positive("paths", self.paths)?;
        if self.paths < 2 {
            return Err(ConfigError::BadField {
                field: "paths",
                problem: format!("must be at least 2, got {}", self.paths),
            });
        }
        if let Some(ep) = self.eval_paths {
            positive("eval_paths", ep)?;
        }
        if self.basis.degree < 0 {
            return Err(ConfigError::BadField {
                field: "basis.degree",
                problem: format!("must be nonnegative, got {}", self.basis.degree),
            });
        }
        if self.basis.mode_degree < 0 {
            return Err(ConfigError::BadField {
                field: "basis.mode_degree",
                problem: format!("must be nonnegative, got {}", self.basis.mode_degree),
            });
        }
        positive("basis.quad_nodes", self.basis.quad_nodes)?;
        positive("oracle.t_steps", self.oracle.t_steps)?;
        positive("oracle.x_nodes", self.oracle.x_nodes)?;
        if let Some(n) = self.penalty.n {
            if !(n >= 0.0) {
                return Err(ConfigError::BadField {
                    field: "penalty.n",
                    problem: format!("must be nonnegative, got {n}"),
                });
            }
        }
        if let Some(ladder) = &self.penalty.ladder {
            if ladder.is_empty() || ladder.iter().any(|n| !(*n >= 0.0)) {
                return Err(ConfigError::BadField {
                    field: "penalty.ladder",
                    problem: "must be a nonempty list of nonnegative levels".into(),
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(ConfigError::BadField {
                field: "eps",
                problem: format!("must be positive, got {}", self.eps),
            });
        }
        if self.estimator != "weighted" && self.estimator != "direct" {
            return Err(ConfigError::BadField {
                field: "estimator",
                problem: format!("must be \"weighted\" or \"direct\", got \"{}\"", self.estimator),
            });
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<SwitchingProblem, ConfigError> {
        Ok(catalog_with(&self.problem.catalog, &self.problem.overrides)?)
    }

    pub fn time_grid(&self) -> TimeGrid {
        let problem_horizon = self.problem.overrides.horizon.unwrap_or(1.0);
        TimeGrid::new(problem_horizon, self.grid.n_steps as usize).expect("validated")
    }

    /// Grid derived from the (already built) problem's horizon.
    pub fn time_grid_for(&self, problem: &SwitchingProblem) -> TimeGrid {
        TimeGrid::new(problem.horizon, self.grid.n_steps as usize).expect("validated")
    }

    pub fn regression_basis(&self) -> RegressionBasis {
        RegressionBasis {
            degree: self.basis.degree as usize,
            mode_degree: self.basis.mode_degree as usize,
            quad_nodes: self.basis.quad_nodes as usize,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.paths as usize
    }

    pub fn n_eval_paths(&self) -> usize {
        self.eval_paths.unwrap_or(self.paths) as usize
    }

    pub fn ladder(&self) -> Vec<f64> {
        self.penalty
            .ladder
            .clone()
            .unwrap_or_else(|| DEFAULT_LADDER.to_vec())
    }
}
