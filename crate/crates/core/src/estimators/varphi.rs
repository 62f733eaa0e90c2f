//! Estimators of `φ`, the solution of the problem without cross-derivative
//! terms, zero terminal data and the original Robin data. Its components
//! are driven by independent Brownian motions with volatilities `σ̃_i`.

use std::time::Instant;

use super::naive::path_functional;
use super::{
    collect_samples, integrator_step, prepare, BoundaryDerivatives, EstimateResult, EstimatorError,
    McBudget, QueryPoint, Scratch,
};
use crate::densities::{
    h_first_passage, h_function, local_time_exp_moment, ComponentLaw, DensityError,
};
use crate::model::{ModelParams, ProblemSpec};
use crate::paths::{first_hitting_index, reflect_into, DriverKind, DriverSampler, TimeGrid};
use crate::quad::gauss_legendre_on;
use crate::rng::{substream, Purpose};
use crate::stats::par_collect_with;

/// `φ(t, x) = −Σ_i E[∫_t^T e^{−ρ(s−t) + Σ c_k L̂^k_s} f_i(s, X̂_s) dL̂^i_s]` by
/// right-endpoint Stieltjes sums along simulated paths.
pub fn estimate_varphi_stieltjes(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    budget: &McBudget,
    seed: u64,
) -> Result<EstimateResult, EstimatorError> {
    let started = Instant::now();
    let grid = prepare(params, spec, q, budget)?;
    if spec.boundary_data_vanishes() || grid.n_steps() == 0 {
        return Ok(EstimateResult::exact(
            0.0,
            budget.n_paths,
            budget.dt,
            seed,
            started,
        ));
    }
    let sampler = DriverSampler::new(params, DriverKind::Independent, budget.segment_max);
    let results = par_collect_with(
        budget.n_paths,
        || Scratch::new(params.d, grid.n_steps(), budget.segment_max),
        |ws, p| {
            let mut rng = substream(seed, Purpose::VarphiStieltjes, p as u64);
            sampler.sample_into(&grid, &mut rng, &mut ws.driver);
            reflect_into(&q.x, &ws.driver, budget.segment_max, &mut ws.path)?;
            path_functional(params, spec, q.t, &grid, ws, false)
        },
    );
    let samples = collect_samples(results)?;
    Ok(EstimateResult::from_samples(
        &samples, budget.dt, seed, started,
    ))
}

/// `h_i` at `s`, switching to the first-passage form for spans too short
/// for difference quotients.
fn h_at(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    match h_function(law, c, x) {
        Err(DensityError::NearSingular { .. }) => h_first_passage(law, c, x),
        other => other,
    }
}

/// Total mass `E[∫_t^T e^{c L} dL]` of the measure `h(s) ds`.
fn h_mass(law_t: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    let m = local_time_exp_moment(law_t, c, x)?;
    Ok(if c == 0.0 { m } else { (m - 1.0) / c })
}

/// Outer rule for the factorized form: Gauss–Legendre in `v = √(s − t)`,
/// doubled until the rule integrates every `h_i` to 1e-4 relative accuracy.
/// Returns the node times and, per component, the weights
/// `w_j · 2 v_j · h_i(s_j) · e^{−ρ v_j²}`.
fn outer_rule(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    n_time_nodes: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), EstimatorError> {
    let span = params.horizon - q.t;
    let vmax = span.sqrt();
    let mut n = n_time_nodes.max(2);
    loop {
        let rule = gauss_legendre_on(n, 0.0, vmax);
        let times: Vec<f64> = rule.iter().map(|(v, _)| q.t + v * v).collect();
        let mut weights = vec![vec![0.0; n]; params.d];
        let mut worst: f64 = 0.0;
        for (i, fi) in spec.f.iter().enumerate() {
            if fi.is_zero() {
                continue;
            }
            let law_t =
                ComponentLaw::new(params.mu[i], params.effective_vol(i), q.t, params.horizon)?;
            let (c, x) = (params.c[i], q.x[i]);
            let mut mass = 0.0;
            for (j, (v, w)) in rule.iter().enumerate() {
                let h = h_at(&law_t.at(times[j]), c, x)?;
                mass += w * 2.0 * v * h;
                weights[i][j] = w * 2.0 * v * h * (-params.rho * v * v).exp();
            }
            let exact = h_mass(&law_t, c, x)?;
            let err = (mass - exact).abs() / exact.abs().max(1e-8);
            worst = worst.max(err);
        }
        if worst <= 1e-4 {
            return Ok((times, weights));
        }
        if n >= 1024 {
            log::warn!(
                "outer rule for the factorized estimator stalls at relative error {worst:.2e}"
            );
            return Ok((times, weights));
        }
        n *= 2;
    }
}

/// `φ(t, x)` via the factorized form
///
/// ```text
/// φ = −Σ_i ∫_t^T e^{−ρ(s−t)} E[e^{Σ_{k≠i} c_k L̂^k_s} f_i(s, X̂_s)] h_i(s) ds
/// ```
///
/// where `h_i(s) ds = d E[∫_t^s e^{c_i L̂^i} dL̂^i]` comes from the law of the
/// running maximum. The inner expectation is estimated from independent
/// component paths sampled exactly at the quadrature nodes; the reported
/// error is that of the inner Monte Carlo average.
pub fn estimate_varphi_factorized(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    n_paths: usize,
    n_time_nodes: usize,
    seed: u64,
) -> Result<EstimateResult, EstimatorError> {
    let started = Instant::now();
    let budget = McBudget::new(n_paths, 1.0);
    prepare(params, spec, q, &budget)?;
    if spec.boundary_data_vanishes() || q.t >= params.horizon {
        return Ok(EstimateResult::exact(0.0, n_paths, 0.0, seed, started));
    }
    let (nodes, weights) = outer_rule(params, spec, q, n_time_nodes)?;
    let mut all = Vec::with_capacity(nodes.len() + 1);
    all.push(q.t);
    all.extend_from_slice(&nodes);
    let grid = TimeGrid::from_nodes(all)?;
    let sampler = DriverSampler::new(params, DriverKind::Independent, true);
    let results = par_collect_with(
        n_paths,
        || Scratch::new(params.d, grid.n_steps(), true),
        |ws, p| {
            let mut rng = substream(seed, Purpose::VarphiFactorized, p as u64);
            sampler.sample_into(&grid, &mut rng, &mut ws.driver);
            reflect_into(&q.x, &ws.driver, true, &mut ws.path)?;
            ws.accumulate_cl(&params.c);
            let mut total = 0.0;
            for (i, fi) in spec.f.iter().enumerate() {
                if fi.is_zero() {
                    continue;
                }
                for (j, w) in weights[i].iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let k = j + 1;
                    ws.load(nodes[j], k);
                    let other = ws.cl[k] - params.c[i] * ws.path.l[i][k];
                    total -= w * other.exp() * fi.eval_slice(&ws.vals)?;
                }
            }
            Ok(total)
        },
    );
    let samples = collect_samples(results)?;
    let mut out = EstimateResult::from_samples(&samples, 0.0, seed, started);
    out.dt = params.horizon - q.t;
    if nodes.len() > 1 {
        out.dt = nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    }
    Ok(out)
}

/// `∂φ/∂x_i (t, x)` by the pathwise (stochastic flow) derivative. With
/// `τ = inf{s : W̃^i_s = x_i}` and `E_{−j}(s) = e^{−ρ(s−t) + Σ_{k≠j} c_k L̂^k_s}`:
///
/// ```text
/// ∂_i φ = E[E_{−i}(τ) f_i(τ, X̂_τ) 1{τ < T}]
///       − Σ_{j≠i} E[∫_t^{τ∧T} E_{−j} ∂_i f_j e^{c_j L̂^j} dL̂^j]
///       + c_i Σ_j E[∫_{τ∧T}^T E_{−j} f_j e^{c_j L̂^j} dL̂^j]
/// ```
pub fn estimate_varphi_gradient(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    i: usize,
    budget: &McBudget,
    seed: u64,
) -> Result<EstimateResult, EstimatorError> {
    let started = Instant::now();
    if i >= params.d {
        return Err(EstimatorError::BadQuery(format!(
            "axis {} out of range",
            i + 1
        )));
    }
    let grid = prepare(params, spec, q, budget)?;
    if spec.boundary_data_vanishes() || grid.n_steps() == 0 {
        return Ok(EstimateResult::exact(
            0.0,
            budget.n_paths,
            budget.dt,
            seed,
            started,
        ));
    }
    let derivs = BoundaryDerivatives::new(spec);
    let sampler = DriverSampler::new(params, DriverKind::Independent, budget.segment_max);
    let times = grid.times();
    let n = grid.n_steps();
    let ci = params.c[i];
    let results = par_collect_with(
        budget.n_paths,
        || Scratch::new(params.d, n, budget.segment_max),
        |ws, p| {
            let mut rng = substream(seed, Purpose::VarphiGradient, p as u64);
            sampler.sample_into(&grid, &mut rng, &mut ws.driver);
            reflect_into(&q.x, &ws.driver, budget.segment_max, &mut ws.path)?;
            ws.accumulate_cl(&params.c);
            let seg = if budget.segment_max {
                ws.driver.seg_max_of(i)
            } else {
                None
            };
            let hit = first_hitting_index(&ws.driver.wtilde[i], seg, q.x[i]);
            let tau = hit.unwrap_or(n + 1);
            let disc = |k: usize| -params.rho * (times[k] - q.t);
            let mut total = 0.0;
            if let Some(h) = hit {
                if !spec.f[i].is_zero() {
                    ws.load(times[h], h);
                    let other = ws.cl[h] - ci * ws.path.l[i][h];
                    total += (disc(h) + other).exp() * spec.f[i].eval_slice(&ws.vals)?;
                }
            }
            for (j, fj) in spec.f.iter().enumerate() {
                let dfj = &derivs.grad[j][i];
                let before = j != i && !dfj.is_zero();
                let after = ci != 0.0 && !fj.is_zero();
                if !before && !after {
                    continue;
                }
                let cj = params.c[j];
                for k in 1..=n {
                    let step = integrator_step(&ws.path.l[j], cj, k);
                    if step == 0.0 {
                        continue;
                    }
                    let weight = (disc(k) + ws.cl[k] - cj * ws.path.l[j][k]).exp() * step;
                    if k < tau {
                        if before {
                            ws.load(times[k], k);
                            total -= weight * dfj.eval_slice(&ws.vals)?;
                        }
                    } else if after {
                        ws.load(times[k], k);
                        total += ci * weight * fj.eval_slice(&ws.vals)?;
                    }
                }
            }
            Ok(total)
        },
    );
    let samples = collect_samples(results)?;
    Ok(EstimateResult::from_samples(
        &samples, budget.dt, seed, started,
    ))
}
