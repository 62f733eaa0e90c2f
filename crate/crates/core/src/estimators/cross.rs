//! Mixed second derivatives `∂²φ/∂x_i∂x_j`, `i ≠ j`, which feed the
//! source term of the homogenized problem.
//!
//! Differentiating the Stieltjes form pathwise gives, with hitting times
//! `τ^i` of level `x_i` by `W̃^i` and `E_{−ℓ}(s) = e^{−ρ(s−t) + Σ_{k≠ℓ} c_k L̂^k_s}`,
//! `dΛ^ℓ = e^{c_ℓ L̂^ℓ} dL̂^ℓ`:
//!
//! ```text
//! ℓ ∉ {i, j}:  −E ∫ E_{−ℓ} [∂_ij f_ℓ 1{s<τ^i, s<τ^j} − c_j ∂_i f_ℓ 1{τ^j≤s<τ^i}
//!                       − c_i ∂_j f_ℓ 1{τ^i≤s<τ^j} + c_i c_j f_ℓ 1{s≥τ^i, s≥τ^j}] dΛ^ℓ
//! ℓ = i:       E[F(τ^i) 1{τ^i<T}] + c_i E ∫ F dΛ^i,
//!              F(s) = E_{−i}(s) [∂_j f_i 1{s<τ^j} − c_j f_i 1{s≥τ^j}]
//! ```
//!
//! and symmetrically for `ℓ = j`. In two dimensions the expectations
//! factorize over the independent components, which leaves
//!
//! ```text
//! ∂_12 φ = Σ_ℓ ∫_{[t,T]} e^{−ρ(s−t)} J_ℓ(s) dK_ℓ(s),   K_ℓ(s) = E[e^{c_ℓ(M^ℓ_s − x_ℓ)} 1{M^ℓ_s > x_ℓ}]
//! J_ℓ(s) = ∂_{x_b} E[e^{c_b L̂^b_s} f_ℓ(s, X̂^b_s)]
//!        = E[∂_b f_ℓ(s, X̂^b_s) 1{M^b_s < x_b}] − c_b E[e^{c_b(M^b_s − x_b)} f_ℓ(s, M^b_s − W̃^b_s) 1{M^b_s > x_b}]
//! ```
//!
//! (`b` the other axis). `K_ℓ` jumps by one at `s = t` when `x_ℓ = 0`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    collect_samples, integrator_step, prepare, BoundaryDerivatives, EstimateResult, EstimatorError,
    McBudget, QueryPoint, Scratch,
};
use crate::densities::{
    exceedance_rate, exceedance_rate_first_passage, joint_density, killed_density, ComponentLaw,
    DensityError,
};
use crate::model::{ModelParams, ProblemSpec};
use crate::paths::{first_hitting_index, reflect_into, DriverKind, DriverSampler, TimeGrid};
use crate::quad::{integrate, QuadOptions};
use crate::rng::{substream, Purpose};
use crate::stats::par_collect_with;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossMode {
    /// Nested deterministic quadrature over the component laws (d = 2).
    Quadrature,
    /// Monte Carlo over the pathwise-derivative representation (any d).
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossTolerances {
    /// Relative tolerance of the outer time integral.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_evals: usize,
    /// Path budget in Monte Carlo mode.
    pub mc: McBudget,
}

impl Default for CrossTolerances {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            max_evals: 20_000,
            mc: McBudget {
                n_paths: 100_000,
                dt: 1e-3,
                segment_max: true,
            },
        }
    }
}

/// Estimate of `∂²φ/∂x_i∂x_j (t, x)` for `i ≠ j` (zero-based axes).
#[allow(clippy::too_many_arguments)]
pub fn varphi_cross_second_derivative(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    i: usize,
    j: usize,
    mode: CrossMode,
    tol: &CrossTolerances,
    seed: u64,
) -> Result<EstimateResult, EstimatorError> {
    let started = Instant::now();
    if i == j || i >= params.d || j >= params.d {
        return Err(EstimatorError::BadQuery(format!(
            "need two distinct axes below {}, got {} and {}",
            params.d,
            i + 1,
            j + 1
        )));
    }
    let derivs = BoundaryDerivatives::new(spec);
    match mode {
        CrossMode::Quadrature => {
            prepare(params, spec, q, &McBudget::new(2, 1.0))?;
            if params.d != 2 {
                return Err(EstimatorError::BadQuery(format!(
                    "quadrature mode needs d = 2, got d = {}",
                    params.d
                )));
            }
            let kernel = CrossKernel::new(params, spec, &derivs, tol);
            let v = kernel.cross(q.t, &q.x)?;
            Ok(EstimateResult::exact(v, 0, 0.0, seed, started))
        }
        CrossMode::Mc => {
            let grid = prepare(params, spec, q, &tol.mc)?;
            let samples = cross_mc_samples(params, spec, &derivs, q, i, j, &grid, &tol.mc, seed)?;
            Ok(EstimateResult::from_samples(
                &samples, tol.mc.dt, seed, started,
            ))
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn cross_mc_samples(
    params: &ModelParams,
    spec: &ProblemSpec,
    derivs: &BoundaryDerivatives,
    q: &QueryPoint,
    i: usize,
    j: usize,
    grid: &TimeGrid,
    budget: &McBudget,
    seed: u64,
) -> Result<Vec<f64>, EstimatorError> {
    let sampler = DriverSampler::new(params, DriverKind::Independent, budget.segment_max);
    let results = par_collect_with(
        budget.n_paths,
        || Scratch::new(params.d, grid.n_steps(), budget.segment_max),
        |ws, p| {
            let mut rng = substream(seed, Purpose::CrossDerivative, p as u64);
            sampler.sample_into(grid, &mut rng, &mut ws.driver);
            reflect_into(&q.x, &ws.driver, budget.segment_max, &mut ws.path)?;
            cross_path(params, spec, derivs, q, i, j, grid, ws, budget.segment_max)
        },
    );
    collect_samples(results)
}

#[allow(clippy::too_many_arguments)]
fn cross_path(
    params: &ModelParams,
    spec: &ProblemSpec,
    derivs: &BoundaryDerivatives,
    q: &QueryPoint,
    i: usize,
    j: usize,
    grid: &TimeGrid,
    ws: &mut Scratch,
    segment_max: bool,
) -> Result<f64, EstimatorError> {
    ws.accumulate_cl(&params.c);
    let n = grid.n_steps();
    let times = grid.times();
    let hit = |axis: usize, ws: &Scratch| {
        let seg = if segment_max {
            ws.driver.seg_max_of(axis)
        } else {
            None
        };
        first_hitting_index(&ws.driver.wtilde[axis], seg, q.x[axis])
    };
    let hit_i = hit(i, ws);
    let hit_j = hit(j, ws);
    let tau_i = hit_i.unwrap_or(n + 1);
    let tau_j = hit_j.unwrap_or(n + 1);
    let (ci, cj) = (params.c[i], params.c[j]);
    let weight = |ws: &Scratch, l: usize, k: usize| {
        (-params.rho * (times[k] - q.t) + ws.cl[k] - params.c[l] * ws.path.l[l][k]).exp()
    };
    let mut total = 0.0;
    for l in 0..params.d {
        let cl = params.c[l];
        if l != i && l != j {
            let fl = &spec.f[l];
            let (dil, djl, dijl) = (
                &derivs.grad[l][i],
                &derivs.grad[l][j],
                &derivs.hess[l][i][j],
            );
            if fl.is_zero() && dil.is_zero() && djl.is_zero() && dijl.is_zero() {
                continue;
            }
            for k in 1..=n {
                let step = integrator_step(&ws.path.l[l], cl, k);
                if step == 0.0 {
                    continue;
                }
                ws.load(times[k], k);
                let integrand = match (k >= tau_i, k >= tau_j) {
                    (false, false) => dijl.eval_slice(&ws.vals)?,
                    (false, true) => -cj * dil.eval_slice(&ws.vals)?,
                    (true, false) => -ci * djl.eval_slice(&ws.vals)?,
                    (true, true) => ci * cj * fl.eval_slice(&ws.vals)?,
                };
                total -= weight(ws, l, k) * integrand * step;
            }
        } else {
            // l is one of the pair; `o` is the other one.
            let (o, tau_l, tau_o, hit_l) = if l == i {
                (j, tau_i, tau_j, hit_i)
            } else {
                (i, tau_j, tau_i, hit_j)
            };
            let fl = &spec.f[l];
            let dfl = &derivs.grad[l][o];
            if fl.is_zero() && dfl.is_zero() {
                continue;
            }
            let co = params.c[o];
            let big_f = |ws: &mut Scratch, k: usize| -> Result<f64, EstimatorError> {
                ws.load(times[k], k);
                let inner = if k < tau_o {
                    dfl.eval_slice(&ws.vals)?
                } else {
                    -co * fl.eval_slice(&ws.vals)?
                };
                Ok(weight(ws, l, k) * inner)
            };
            if let Some(h) = hit_l {
                total += big_f(ws, h)?;
            }
            if cl != 0.0 {
                for k in tau_l.max(1)..=n {
                    let step = integrator_step(&ws.path.l[l], cl, k);
                    if step != 0.0 {
                        total += cl * big_f(ws, k)? * step;
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Deterministic kernels of the two-dimensional representation.
pub(crate) struct CrossKernel<'a> {
    params: &'a ModelParams,
    spec: &'a ProblemSpec,
    derivs: &'a BoundaryDerivatives,
    inner: QuadOptions,
    outer: QuadOptions,
    vols: Vec<f64>,
    first_passage_rate: bool,
}

const WIDTH: f64 = 12.0;

impl<'a> CrossKernel<'a> {
    pub fn new(
        params: &'a ModelParams,
        spec: &'a ProblemSpec,
        derivs: &'a BoundaryDerivatives,
        tol: &CrossTolerances,
    ) -> Self {
        Self {
            params,
            spec,
            derivs,
            inner: QuadOptions {
                initial_panels: 2,
                max_evals: tol.max_evals,
                ..QuadOptions::tol(1e-13, 1e-9)
            },
            outer: QuadOptions {
                initial_panels: 4,
                max_evals: tol.max_evals,
                ..QuadOptions::tol(tol.abs_tol, tol.rel_tol)
            },
            vols: params.effective_vols(),
            first_passage_rate: false,
        }
    }

    /// Evaluates `K_ℓ` through the first-passage density instead of
    /// differentiating the exceedance moment in `s`. Same quantity, one
    /// integral instead of a Richardson table.
    pub fn with_first_passage_rate(mut self) -> Self {
        self.first_passage_rate = true;
        self
    }

    fn law(&self, axis: usize, t: f64, s: f64) -> Result<ComponentLaw, DensityError> {
        ComponentLaw::new(self.params.mu[axis], self.vols[axis], t, s)
    }

    /// `J_ℓ(s)` for the component `b ≠ ℓ` started at `xb` at time `t`.
    pub fn j_value(&self, l: usize, t: f64, s: f64, xb: f64) -> Result<f64, EstimatorError> {
        let b = 1 - l;
        let fl = &self.spec.f[l];
        let dfl = &self.derivs.grad[l][b];
        let cb = self.params.c[b];
        let mut vals = [s, 0.0, 0.0];
        let mut eval = |e: &crate::expr::Expr, z: f64| -> Result<f64, EstimatorError> {
            vals[b + 1] = z;
            Ok(e.eval_slice(&vals)?)
        };
        if s <= t {
            return if xb > 0.0 {
                eval(dfl, xb)
            } else {
                Ok(-cb * eval(fl, 0.0)?)
            };
        }
        let law = self.law(b, t, s)?;
        let (nu, u) = (law.nu(), law.span());
        let sc = law.vol * u.sqrt();
        let mut total = 0.0;
        if !dfl.is_zero() && xb > 0.0 {
            let lo = (xb - nu * u - WIDTH * sc).max(0.0);
            let hi = xb - nu * u + WIDTH * sc;
            if hi > lo {
                let mut err = None;
                let r = integrate(
                    |z| match eval(dfl, z) {
                        Ok(v) => v * killed_density(&law, xb, xb - z),
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    },
                    lo,
                    hi,
                    &self.inner,
                )?;
                if let Some(e) = err {
                    return Err(e);
                }
                total += r.value;
            }
        }
        if cb != 0.0 && !fl.is_zero() {
            let y_hi = xb.max(nu * u + cb.max(0.0) * law.vol * law.vol * u) + WIDTH * sc;
            let mut err = None;
            let r = integrate(
                |y| {
                    let w_hi = y.max(-nu * u) + WIDTH * sc;
                    let inner = integrate(
                        |w| match eval(fl, w - y) {
                            Ok(v) => v * joint_density(&law, 2.0 * y - w, y),
                            Err(e) => {
                                err.get_or_insert(e);
                                0.0
                            }
                        },
                        y,
                        w_hi,
                        &self.inner,
                    );
                    match inner {
                        Ok(v) => (cb * (y - xb)).exp() * v.value,
                        Err(e) => {
                            err.get_or_insert(e.into());
                            0.0
                        }
                    }
                },
                xb,
                y_hi,
                &self.inner,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            total -= cb * r.value;
        }
        Ok(total)
    }

    /// Density of `dK_ℓ` at `s` for the component started at `xl`.
    pub fn k_rate(&self, l: usize, t: f64, s: f64, xl: f64) -> Result<f64, EstimatorError> {
        let law = self.law(l, t, s)?;
        let c = self.params.c[l];
        if self.first_passage_rate {
            return Ok(exceedance_rate_first_passage(&law, c, xl)?);
        }
        match exceedance_rate(&law, c, xl) {
            Err(DensityError::NearSingular { .. }) => {
                Ok(exceedance_rate_first_passage(&law, c, xl)?)
            }
            other => Ok(other?),
        }
    }

    /// `∫_{[t,T]} e^{−ρ(s−t)} J_ℓ dK_ℓ`, integrated in `v = √(s − t)`.
    pub fn d_term(&self, l: usize, t: f64, x: &[f64]) -> Result<f64, EstimatorError> {
        let b = 1 - l;
        if self.spec.f[l].is_zero() && self.derivs.grad[l][b].is_zero() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        if x[l] == 0.0 {
            total += self.j_value(l, t, t, x[b])?;
        }
        let vmax = (self.params.horizon - t).max(0.0).sqrt();
        if vmax == 0.0 {
            return Ok(total);
        }
        let mut err = None;
        let r = integrate(
            |v| {
                let s = t + v * v;
                let value = self.k_rate(l, t, s, x[l]).and_then(|k| {
                    if k == 0.0 {
                        Ok(0.0)
                    } else {
                        Ok(k * self.j_value(l, t, s, x[b])?)
                    }
                });
                match value {
                    Ok(kj) => 2.0 * v * (-self.params.rho * v * v).exp() * kj,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                }
            },
            0.0,
            vmax,
            &self.outer,
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        Ok(total + r.value)
    }

    pub fn cross(&self, t: f64, x: &[f64]) -> Result<f64, EstimatorError> {
        Ok(self.d_term(0, t, x)? + self.d_term(1, t, x)?)
    }
}
