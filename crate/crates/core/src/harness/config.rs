use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manufactured::make_manufactured_problem;
use super::HarnessError;
use crate::estimators::{CrossMode, DecompositionBudget, LatticeSpec, McBudget, QueryPoint};
use crate::expr::Expr;
use crate::model::{ModelError, ModelParams, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Naive,
    Decomposed,
    #[default]
    Both,
    FdCompare,
    Selftest,
    Convergence,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Mode::Naive),
            "decomposed" => Ok(Mode::Decomposed),
            "both" => Ok(Mode::Both),
            "fd_compare" => Ok(Mode::FdCompare),
            "selftest" => Ok(Mode::Selftest),
            "convergence" => Ok(Mode::Convergence),
            other => Err(format!(
                "unknown mode `{other}` (expected naive, decomposed, both, fd_compare, selftest or convergence)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Naive,
    #[default]
    Decomposed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub query_points: Vec<QueryConfig>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    /// Defaults to the row length of `sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default)]
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<f64>>,
    #[serde(rename = "T")]
    pub horizon: f64,
}

/// Either explicit data `f`, `g` or a manufactured exponential solution.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manufactured: Option<ManufacturedConfig>,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManufacturedConfig {
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub n_paths: usize,
    pub dt: f64,
    pub segment_max: bool,
    pub n_time_nodes: usize,
    pub lattice_spacing: f64,
    pub lattice_time_nodes: usize,
    pub lattice_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_mode: Option<CrossMode>,
    pub lattice_mc_paths: usize,
    pub lattice_mc_dt: f64,
    pub fd_n_x: usize,
    pub fd_dt: f64,
    /// Monte Carlo estimator compared with the grid solution in `fd_compare`.
    pub compare_with: Estimator,
}

impl Default for Budgets {
    fn default() -> Self {
        let lat = LatticeSpec::default();
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            segment_max: true,
            n_time_nodes: 32,
            lattice_spacing: lat.spacing,
            lattice_time_nodes: lat.time_nodes,
            lattice_width: lat.width,
            cross_mode: None,
            lattice_mc_paths: lat.mc_paths,
            lattice_mc_dt: lat.mc_dt,
            fd_n_x: 128,
            fd_dt: 1e-3,
            compare_with: Estimator::Decomposed,
        }
    }
}

impl Budgets {
    pub fn mc(&self) -> McBudget {
        McBudget {
            n_paths: self.n_paths,
            dt: self.dt,
            segment_max: self.segment_max,
        }
    }

    pub fn decomposition(&self) -> DecompositionBudget {
        DecompositionBudget {
            n_paths: self.n_paths,
            dt: self.dt,
            n_time_nodes: self.n_time_nodes,
            segment_max: self.segment_max,
            lattice: LatticeSpec {
                spacing: self.lattice_spacing,
                time_nodes: self.lattice_time_nodes,
                width: self.lattice_width,
                mode: self.cross_mode,
                mc_paths: self.lattice_mc_paths,
                mc_dt: self.lattice_mc_dt,
            },
        }
    }

    fn check(&self) -> Result<(), HarnessError> {
        let positive = [
            ("budgets.n_paths", self.n_paths as f64),
            ("budgets.dt", self.dt),
            ("budgets.n_time_nodes", self.n_time_nodes as f64),
            ("budgets.lattice_spacing", self.lattice_spacing),
            ("budgets.lattice_width", self.lattice_width),
            ("budgets.lattice_mc_paths", self.lattice_mc_paths as f64),
            ("budgets.lattice_mc_dt", self.lattice_mc_dt),
            ("budgets.fd_n_x", self.fd_n_x as f64),
            ("budgets.fd_dt", self.fd_dt),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::validation(
                    field,
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if self.lattice_time_nodes < 2 {
            return Err(HarnessError::validation(
                "budgets.lattice_time_nodes",
                "at least 2 time nodes are needed",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
}

/// Budget ladder of a convergence study. Lists given for both `n_paths` and
/// `dt` are paired entry by entry; a missing list is filled from `budgets`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub estimator: Estimator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<Vec<f64>>,
    /// Known value at the first query point, used for the bias check.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

/// One rung of a convergence ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub n_paths: usize,
    pub dt: f64,
}

impl ExperimentConfig {
    /// Builds the ladder described by the `convergence` table.
    pub fn ladder(&self) -> Result<Vec<Rung>, HarnessError> {
        let conv = self.convergence.as_ref().ok_or_else(|| {
            HarnessError::validation(
                "convergence",
                "mode `convergence` needs a [convergence] table",
            )
        })?;
        let rungs: Vec<Rung> = match (&conv.n_paths, &conv.dt) {
            (Some(n), Some(dt)) => {
                if n.len() != dt.len() {
                    return Err(HarnessError::validation(
                        "convergence",
                        format!("n_paths has {} entries but dt has {}", n.len(), dt.len()),
                    ));
                }
                n.iter()
                    .zip(dt)
                    .map(|(&n_paths, &dt)| Rung { n_paths, dt })
                    .collect()
            }
            (Some(n), None) => n
                .iter()
                .map(|&n_paths| Rung {
                    n_paths,
                    dt: self.budgets.dt,
                })
                .collect(),
            (None, Some(dt)) => dt
                .iter()
                .map(|&dt| Rung {
                    n_paths: self.budgets.n_paths,
                    dt,
                })
                .collect(),
            (None, None) => {
                return Err(HarnessError::validation(
                    "convergence",
                    "give n_paths and/or dt lists",
                ));
            }
        };
        if rungs.is_empty() {
            return Err(HarnessError::validation(
                "convergence",
                "the ladder is empty",
            ));
        }
        Ok(rungs)
    }
}

/// A configuration turned into solver inputs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub params: ModelParams,
    pub spec: ProblemSpec,
    /// Closed-form solution when the problem is manufactured.
    pub closed_form: Option<Expr>,
    pub queries: Vec<QueryPoint>,
}

fn model_error(e: ModelError) -> HarnessError {
    let field = match &e {
        ModelError::NonPositiveDefinite { .. } => "model.sigma".to_string(),
        ModelError::DimensionMismatch { field, .. } | ModelError::BadScalar { field, .. } => {
            if *field == "f" || *field == "g" {
                format!("problem.{field}")
            } else {
                format!("model.{field}")
            }
        }
        ModelError::BadProblem { field, .. } => format!("problem.{field}"),
        ModelError::Expr(_) => "problem".to_string(),
    };
    HarnessError::validation(&field, e.to_string())
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<Resolved, HarnessError> {
        let m = &self.model;
        let d = m.d;
        let params = ModelParams {
            d,
            m: m.m.unwrap_or_else(|| m.sigma.first().map_or(0, Vec::len)),
            mu: m.mu.clone().unwrap_or_else(|| vec![0.0; d]),
            sigma: m.sigma.clone(),
            rho: m.rho,
            c: m.c.clone().unwrap_or_else(|| vec![0.0; d]),
            horizon: m.horizon,
        }
        .validate()
        .map_err(model_error)?;
        self.budgets.check()?;

        let p = &self.problem;
        let (spec, closed_form) = match (&p.f, &p.g, &p.manufactured) {
            (None, None, Some(man)) => {
                if man.a.len() != d {
                    return Err(HarnessError::validation(
                        "problem.manufactured.a",
                        format!("expected {d} entries, got {}", man.a.len()),
                    ));
                }
                let (mut spec, u) = make_manufactured_problem(&params, &man.a)?;
                if !p.label.is_empty() {
                    spec.label = p.label.clone();
                }
                (spec, Some(u))
            }
            (Some(f), Some(g), None) => {
                let f: Vec<&str> = f.iter().map(String::as_str).collect();
                (
                    ProblemSpec::parse(d, &f, g, &p.label).map_err(model_error)?,
                    None,
                )
            }
            (_, _, Some(_)) => {
                return Err(HarnessError::validation(
                    "problem",
                    "give either `manufactured` or `f` and `g`, not both",
                ));
            }
            _ => {
                return Err(HarnessError::validation(
                    "problem",
                    "both `f` and `g` are required",
                ));
            }
        };

        let mut queries = Vec::with_capacity(self.query_points.len());
        for (k, q) in self.query_points.iter().enumerate() {
            let qp = QueryPoint::new(q.t, &q.x);
            qp.check(&params).map_err(|e| {
                HarnessError::validation(&format!("query_points[{k}]"), e.to_string())
            })?;
            queries.push(qp);
        }
        let needs_queries = !matches!(self.mode, Mode::Selftest);
        if needs_queries && queries.is_empty() {
            return Err(HarnessError::validation(
                "query_points",
                "at least one query point is required",
            ));
        }
        if matches!(self.mode, Mode::FdCompare) && d != 2 {
            return Err(HarnessError::validation(
                "model.d",
                "fd_compare needs d = 2",
            ));
        }
        if matches!(self.mode, Mode::Convergence) {
            self.ladder()?;
        }
        Ok(Resolved {
            params,
            spec,
            closed_form,
            queries,
        })
    }
}

/// Line and column (1-based) of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

/// Parses a configuration from text; `json` selects the format.
pub fn parse_config(text: &str, json: bool) -> Result<ExperimentConfig, HarnessError> {
    if json {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    } else {
        toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let (l, c) = line_col(text, s.start);
                    format!("line {l}, column {c}")
                })
                .unwrap_or_else(|| "unknown".into());
            HarnessError::Parse {
                location,
                message: e.message().to_string(),
            }
        })
    }
}

/// Reads, parses and validates a configuration file. Files ending in
/// `.json` are read as JSON, everything else as TOML.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let config = parse_config(&text, json)?;
    config.resolve()?;
    Ok(config)
}
