use std::time::Instant;

use serde::Serialize;

use super::{CheckVerdict, Estimator, ExperimentConfig, HarnessError, RunReport, Rung};
use crate::estimators::{
    estimate_u_naive, DecomposedSolver, EstimateResult, EstimatorError, McBudget,
};
use crate::stats::slope;

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n_paths: usize,
    pub dt: f64,
    pub value: f64,
    pub std_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub estimator: Estimator,
    pub t: f64,
    pub x: Vec<f64>,
    pub rows: Vec<ConvergenceRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    /// Log-log slope of the standard error against the path count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_monotone: Option<bool>,
    pub degenerate: bool,
}

fn distinct<T: PartialEq + Copy>(v: impl Iterator<Item = T>) -> usize {
    let mut seen: Vec<T> = Vec::new();
    for x in v {
        if !seen.contains(&x) {
            seen.push(x);
        }
    }
    seen.len()
}

/// Runs the configured estimator at the first query point for every rung
/// of `ladder`. With several path counts the standard errors are fitted
/// against `n` in log-log scale (expected slope −½, accepted in
/// [−0.6, −0.4]); with several step sizes and a known reference the
/// absolute bias must not grow as `dt` shrinks.
pub fn convergence_study(
    config: &ExperimentConfig,
    ladder: &[Rung],
) -> Result<RunReport, HarnessError> {
    let res = config.resolve()?;
    if ladder.is_empty() {
        return Err(HarnessError::validation(
            "convergence",
            "the ladder is empty",
        ));
    }
    let ascending = ladder
        .windows(2)
        .all(|w| w[0].n_paths <= w[1].n_paths && w[0].dt >= w[1].dt);
    if !ascending {
        return Err(HarnessError::validation(
            "convergence",
            "the ladder must be ascending (n_paths non-decreasing, dt non-increasing)",
        ));
    }
    let q = res.queries.first().ok_or_else(|| {
        HarnessError::validation("query_points", "a convergence study needs a query point")
    })?;
    let conv = config.convergence.clone().unwrap_or_default();
    let reference = match (conv.reference, &res.closed_form) {
        (Some(r), _) => Some(r),
        (None, Some(u)) => {
            let mut v = vec![q.t];
            v.extend_from_slice(&q.x);
            Some(u.eval_slice(&v).map_err(EstimatorError::from)?)
        }
        (None, None) => None,
    };

    let mut report = RunReport::new(config);
    let started = Instant::now();
    let mut rows = Vec::with_capacity(ladder.len());
    for rung in ladder {
        let est: EstimateResult = match conv.estimator {
            Estimator::Naive => {
                let mc = McBudget {
                    n_paths: rung.n_paths,
                    dt: rung.dt,
                    segment_max: config.budgets.segment_max,
                };
                estimate_u_naive(&res.params, &res.spec, q, &mc, config.seed)?
            }
            Estimator::Decomposed => {
                let mut budget = config.budgets.decomposition();
                budget.n_paths = rung.n_paths;
                budget.dt = rung.dt;
                let solver = DecomposedSolver::new(
                    &res.params,
                    &res.spec,
                    budget,
                    std::slice::from_ref(q),
                    config.seed,
                )?;
                solver.estimate(q)?.u
            }
        };
        let name = match conv.estimator {
            Estimator::Naive => "naive",
            Estimator::Decomposed => "decomposed",
        };
        report.push(q, name, est);
        rows.push(ConvergenceRow {
            n_paths: rung.n_paths,
            dt: rung.dt,
            value: est.value,
            std_error: est.std_error,
            bias: reference.map(|r| est.value - r),
        });
    }
    report.time("convergence", started);

    let degenerate = ladder.len() < 2;
    let mut se_slope = None;
    let mut bias_monotone = None;
    if degenerate {
        let msg = "single-entry ladder: nothing to fit".to_string();
        log::warn!("{msg}");
        report.warnings.push(msg);
    } else {
        if distinct(ladder.iter().map(|r| r.n_paths)) >= 2 {
            let usable: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.std_error > 0.0).collect();
            if usable.len() >= 2 {
                let ln_n: Vec<f64> = usable.iter().map(|r| (r.n_paths as f64).ln()).collect();
                let ln_se: Vec<f64> = usable.iter().map(|r| r.std_error.ln()).collect();
                let s = slope(&ln_n, &ln_se);
                se_slope = Some(s);
                report.checks.push(CheckVerdict::new(
                    "standard error scaling",
                    (-0.6..=-0.4).contains(&s),
                    format!("log-log slope {s:.4}, accepted [-0.6, -0.4]"),
                ));
            } else {
                report
                    .warnings
                    .push("standard errors vanish; no slope fitted".into());
            }
        }
        if distinct(ladder.iter().map(|r| r.dt.to_bits())) >= 2 {
            match reference {
                Some(_) => {
                    let bias: Vec<f64> = rows.iter().filter_map(|r| r.bias.map(f64::abs)).collect();
                    let ok = bias.windows(2).all(|w| w[1] <= w[0]);
                    bias_monotone = Some(ok);
                    let text: Vec<String> = bias.iter().map(|b| format!("{b:.4e}")).collect();
                    report.checks.push(CheckVerdict::new(
                        "bias shrinks with dt",
                        ok,
                        format!("absolute bias along the ladder: {}", text.join(", ")),
                    ));
                }
                None => report
                    .warnings
                    .push("dt varies but no reference value is known; bias not checked".into()),
            }
        }
    }
    report.convergence = Some(ConvergenceReport {
        estimator: conv.estimator,
        t: q.t,
        x: q.x.clone(),
        rows,
        reference,
        se_slope,
        bias_monotone,
        degenerate,
    });
    Ok(report.finish())
}
