//! Experiment orchestration: configuration files, runs in the various
//! modes, cross-checks and the `results.csv` / `report.json` outputs.
//!
//! `results.csv` columns, in this order: `t, x1..xd, estimator, value,
//! std_error, n_paths, dt, seed`. Timings go to `report.json` only, so that
//! the CSV of a seeded run is byte-identical across reruns and worker counts.

mod config;
mod convergence;
mod manufactured;
mod selftest;

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

pub use config::{
    load_config, parse_config, Budgets, ConvergenceConfig, Estimator, ExperimentConfig,
    ManufacturedConfig, Mode, ModelConfig, OutputFormat, Outputs, ProblemConfig, QueryConfig,
    Resolved, Rung,
};
pub use convergence::{convergence_study, ConvergenceReport, ConvergenceRow};
pub use manufactured::make_manufactured_problem;
pub use selftest::selftest;

use crate::estimators::{
    estimate_u_naive, robin_residual, DecomposedSolver, EstimateResult, EstimatorError, QueryPoint,
};
use crate::fd_oracle::{compare, solve_robin_fd, ComparisonReport, FarBc, FdError, Grid2D};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error("cannot write output {path}: {message}")]
    Output { path: String, message: String },
}

impl HarnessError {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        HarnessError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// 2 for input errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Io { .. }
            | HarnessError::Parse { .. }
            | HarnessError::Validation { .. } => 2,
            HarnessError::Estimator(
                EstimatorError::Model(_)
                | EstimatorError::BadQuery(_)
                | EstimatorError::BadBudget(_),
            ) => 2,
            HarnessError::Fd(
                FdError::BadGrid(_)
                | FdError::Dimension(_)
                | FdError::ProbeOutOfDomain { .. }
                | FdError::LengthMismatch { .. },
            ) => 2,
            HarnessError::Output { .. } => 2,
            HarnessError::Estimator(_) | HarnessError::Fd(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Io { .. } => "io",
            HarnessError::Parse { .. } => "parse",
            HarnessError::Validation { .. } => "validation",
            HarnessError::Estimator(_) => "estimator",
            HarnessError::Fd(_) => "fd_oracle",
            HarnessError::Output { .. } => "output",
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        let mut rec = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let HarnessError::Validation { field, .. } = self {
            rec["field"] = serde_json::Value::String(field.clone());
        }
        if let HarnessError::Parse { location, .. } = self {
            rec["location"] = serde_json::Value::String(location.clone());
        }
        rec
    }
}

macro_rules! via_estimator {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Estimator(e.into())
            }
        }
    )*};
}

via_estimator!(
    crate::paths::PathError,
    crate::densities::DensityError,
    crate::quad::QuadError,
    crate::expr::ExprError
);

#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub estimator: String,
    #[serde(flatten)]
    pub result: EstimateResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckVerdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckVerdict {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualRecord {
    pub t: f64,
    pub axis: usize,
    pub x_minus_i: Vec<f64>,
    pub eps: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub software_version: String,
    pub master_seed: u64,
    pub mode: Mode,
    pub config: ExperimentConfig,
    pub results: Vec<ResultRow>,
    pub checks: Vec<CheckVerdict>,
    pub residuals: Vec<ResidualRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_comparison: Option<ComparisonReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceReport>,
    pub warnings: Vec<String>,
    pub timings: Vec<Timing>,
    pub all_pass: bool,
}

impl RunReport {
    pub(crate) fn new(config: &ExperimentConfig) -> Self {
        Self {
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.seed,
            mode: config.mode,
            config: config.clone(),
            results: Vec::new(),
            checks: Vec::new(),
            residuals: Vec::new(),
            fd_comparison: None,
            convergence: None,
            warnings: Vec::new(),
            timings: Vec::new(),
            all_pass: true,
        }
    }

    pub(crate) fn push(&mut self, q: &QueryPoint, estimator: &str, result: EstimateResult) {
        self.results.push(ResultRow {
            t: q.t,
            x: q.x.clone(),
            estimator: estimator.to_string(),
            result,
        });
    }

    pub(crate) fn time(&mut self, phase: &str, started: Instant) {
        self.timings.push(Timing {
            phase: phase.to_string(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    pub(crate) fn finish(mut self) -> Self {
        self.all_pass = self.checks.iter().all(|c| c.pass);
        self
    }

    /// The CSV table (see the module docs for the column order).
    pub fn csv(&self, d: usize) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header
            .extend(["estimator", "value", "std_error", "n_paths", "dt", "seed"].map(String::from));
        let out_err = |e: csv::Error| HarnessError::Output {
            path: "results.csv".into(),
            message: e.to_string(),
        };
        w.write_record(&header).map_err(out_err)?;
        for row in &self.results {
            let mut rec = vec![row.t.to_string()];
            rec.extend(row.x.iter().map(f64::to_string));
            rec.push(row.estimator.clone());
            rec.push(row.result.value.to_string());
            rec.push(row.result.std_error.to_string());
            rec.push(row.result.n_paths.to_string());
            rec.push(row.result.dt.to_string());
            rec.push(row.result.seed.to_string());
            w.write_record(&rec).map_err(out_err)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Output {
            path: "results.csv".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("CSV of numbers and names is UTF-8"))
    }

    /// Writes `results.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path, d: usize) -> Result<(), HarnessError> {
        let io = |path: &Path, e: std::io::Error| HarnessError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let csv_path = dir.join("results.csv");
        std::fs::write(&csv_path, self.csv(d)?).map_err(|e| io(&csv_path, e))?;
        let json_path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Output {
            path: json_path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(&json_path, json).map_err(|e| io(&json_path, e))?;
        Ok(())
    }
}

/// `|a − b| ≤ max(rel·|reference|, k · combined SE)`.
fn agreement(
    name: String,
    a: &EstimateResult,
    b: &EstimateResult,
    rel: f64,
    reference: f64,
) -> CheckVerdict {
    let se = a.std_error.hypot(b.std_error);
    let gap = (a.value - b.value).abs();
    let tol = (rel * reference.abs()).max(3.0 * se) + 1e-12 * reference.abs().max(1.0);
    CheckVerdict::new(
        name,
        gap <= tol,
        format!("gap {gap:.6e}, tolerance {tol:.6e}, combined SE {se:.3e}"),
    )
}

fn describe(q: &QueryPoint) -> String {
    let x: Vec<String> = q.x.iter().map(|v| v.to_string()).collect();
    format!("t={} x=({})", q.t, x.join(","))
}

fn reference_check(
    report: &mut RunReport,
    res: &Resolved,
    q: &QueryPoint,
    estimator: &str,
    est: &EstimateResult,
) -> Result<(), HarnessError> {
    if let Some(u) = &res.closed_form {
        let mut v = vec![q.t];
        v.extend_from_slice(&q.x);
        let exact = u.eval_slice(&v).map_err(EstimatorError::from)?;
        let exact = EstimateResult {
            value: exact,
            std_error: 0.0,
            ..*est
        };
        report.checks.push(agreement(
            format!("{estimator} vs closed form at {}", describe(q)),
            est,
            &exact,
            0.01,
            exact.value,
        ));
    }
    Ok(())
}

/// Executes the configured mode and returns the report without writing it.
pub fn execute(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let res = config.resolve()?;
    match config.mode {
        Mode::Selftest => return selftest(config),
        Mode::Convergence => return convergence_study(config, &config.ladder()?),
        _ => {}
    }
    let mut report = RunReport::new(config);
    let seed = config.seed;
    let mc = config.budgets.mc();
    let want_naive = matches!(config.mode, Mode::Naive | Mode::Both)
        || (config.mode == Mode::FdCompare && config.budgets.compare_with == Estimator::Naive);
    let want_decomposed = matches!(config.mode, Mode::Decomposed | Mode::Both)
        || (config.mode == Mode::FdCompare && config.budgets.compare_with == Estimator::Decomposed);

    let mut naive = Vec::new();
    if want_naive {
        let started = Instant::now();
        for q in &res.queries {
            let est = estimate_u_naive(&res.params, &res.spec, q, &mc, seed)?;
            report.push(q, "naive", est);
            reference_check(&mut report, &res, q, "naive", &est)?;
            naive.push(est);
        }
        report.time("naive", started);
    }

    let mut decomposed = Vec::new();
    if want_decomposed {
        let started = Instant::now();
        let solver = DecomposedSolver::new(
            &res.params,
            &res.spec,
            config.budgets.decomposition(),
            &res.queries,
            seed,
        )?;
        report.time("lattice", started);
        let started = Instant::now();
        for q in &res.queries {
            let est = solver.estimate(q)?;
            report.push(q, "phi", est.phi);
            report.push(q, "psi", est.psi);
            report.push(q, "decomposed", est.u);
            reference_check(&mut report, &res, q, "decomposed", &est.u)?;
            decomposed.push(est.u);
        }
        if let Some(lat) = solver.lattice() {
            if lat.clamped_count() > 0 {
                report.warnings.push(format!(
                    "{} lattice lookups were clamped to the tabulated box",
                    lat.clamped_count()
                ));
            }
        }
        report.time("decomposed", started);
    }

    if config.mode == Mode::Both {
        let diagonal = res.params.is_diagonal();
        for ((q, a), b) in res.queries.iter().zip(&naive).zip(&decomposed) {
            // With cross terms the lattice adds a small bias; allow 1%.
            let rel = if diagonal { 0.0 } else { 0.01 };
            report.checks.push(agreement(
                format!("naive vs decomposed at {}", describe(q)),
                a,
                b,
                rel,
                a.value,
            ));
        }
    }

    if config.mode == Mode::FdCompare {
        let started = Instant::now();
        let mut grid = Grid2D::for_queries(
            &res.params,
            &res.queries,
            config.budgets.fd_n_x,
            config.budgets.fd_dt,
        );
        let steps = (res.params.horizon / grid.dt_fd).ceil() as usize;
        grid.store_every = (steps / 100).max(1);
        let far = match &res.closed_form {
            Some(u) => FarBc::DirichletKnown(u.clone()),
            None => FarBc::LinearExtrapolation,
        };
        let fd = solve_robin_fd(&res.params, &res.spec, &grid, &far)?;
        for q in &res.queries {
            let v = fd.value_at(q.t, &q.x)?;
            report.push(
                q,
                "fd",
                EstimateResult {
                    value: v,
                    std_error: 0.0,
                    n_paths: 0,
                    dt: grid.dt_fd,
                    seed,
                    wall_time: 0.0,
                },
            );
        }
        let mc_values = if naive.is_empty() {
            &decomposed
        } else {
            &naive
        };
        let cmp = compare(&fd, &res.queries, mc_values)?;
        for row in &cmp.probes {
            let q = QueryPoint::new(row.t, &row.x);
            report.checks.push(CheckVerdict::new(
                format!("fd vs monte carlo at {}", describe(&q)),
                row.pass,
                format!("gap {:.6e}, tolerance {:.6e}", row.abs_gap, row.tolerance),
            ));
        }
        let eps = fd.dx();
        for q in &res.queries {
            for i in 0..2 {
                let other = vec![q.x[1 - i]];
                let r = robin_residual(
                    &res.params,
                    &res.spec,
                    q.t,
                    i,
                    &other,
                    |t, x| {
                        fd.value_at(t, x)
                            .map_err(|e| EstimatorError::BadQuery(e.to_string()))
                    },
                    eps,
                )?;
                report.residuals.push(ResidualRecord {
                    t: q.t,
                    axis: i + 1,
                    x_minus_i: other,
                    eps,
                    residual: r,
                });
            }
        }
        report.fd_comparison = Some(cmp);
        report.time("fd", started);
    }
    Ok(report.finish())
}

/// Executes the configured mode and writes `results.csv` and `report.json`
/// into the configured output directory.
pub fn run(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let report = execute(config)?;
    report.write(&config.outputs.dir, config.model.d)?;
    Ok(report)
}
