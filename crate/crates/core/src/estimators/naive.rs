use std::time::Instant;

use super::{
    collect_samples, integrator_step, prepare, EstimateResult, EstimatorError, McBudget,
    QueryPoint, Scratch,
};
use crate::model::{ModelParams, ProblemSpec};
use crate::paths::{reflect_into, DriverKind, DriverSampler, TimeGrid};
use crate::rng::{substream, Purpose};
use crate::stats::par_collect_with;

/// Direct estimate of `u(t, x)` with correlated drivers:
///
/// ```text
/// u = E[e^{−ρ(T−t) + Σ c_k L^k_T} g(X_T)] − Σ_i E[∫_t^T e^{−ρ(s−t) + Σ c_k L^k_s} f_i(s, X_s) dL^i_s]
/// ```
pub fn estimate_u_naive(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    budget: &McBudget,
    seed: u64,
) -> Result<EstimateResult, EstimatorError> {
    let started = Instant::now();
    let grid = prepare(params, spec, q, budget)?;
    if spec.boundary_data_vanishes() && spec.g.is_zero() {
        return Ok(EstimateResult::exact(
            0.0,
            budget.n_paths,
            budget.dt,
            seed,
            started,
        ));
    }
    let sampler = DriverSampler::new(params, DriverKind::Correlated, budget.segment_max);
    let d = params.d;
    let results = par_collect_with(
        budget.n_paths,
        || Scratch::new(d, grid.n_steps(), budget.segment_max),
        |ws, p| {
            let mut rng = substream(seed, Purpose::Naive, p as u64);
            sampler.sample_into(&grid, &mut rng, &mut ws.driver);
            reflect_into(&q.x, &ws.driver, budget.segment_max, &mut ws.path)?;
            path_functional(params, spec, q.t, &grid, ws, true)
        },
    );
    let samples = collect_samples(results)?;
    Ok(EstimateResult::from_samples(
        &samples, budget.dt, seed, started,
    ))
}

/// Boundary part (and, if requested, terminal part) of the Feynman–Kac
/// functional along the path held in `ws`.
pub(crate) fn path_functional(
    params: &ModelParams,
    spec: &ProblemSpec,
    t: f64,
    grid: &TimeGrid,
    ws: &mut Scratch,
    with_terminal: bool,
) -> Result<f64, EstimatorError> {
    ws.accumulate_cl(&params.c);
    let n = grid.n_steps();
    let times = grid.times();
    let mut total = 0.0;
    if with_terminal && !spec.g.is_zero() {
        ws.load(times[n], n);
        total += (-params.rho * (times[n] - t) + ws.cl[n]).exp() * spec.g.eval_slice(&ws.vals)?;
    }
    for (i, fi) in spec.f.iter().enumerate() {
        if fi.is_zero() {
            continue;
        }
        let ci = params.c[i];
        for k in 1..=n {
            let step = integrator_step(&ws.path.l[i], ci, k);
            if step == 0.0 {
                continue;
            }
            let s = times[k];
            ws.load(s, k);
            let other = ws.cl[k] - ci * ws.path.l[i][k];
            total -= (-params.rho * (s - t) + other).exp() * fi.eval_slice(&ws.vals)? * step;
        }
    }
    Ok(total)
}
