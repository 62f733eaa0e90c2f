//! The homogenized remainder `ψ = u − φ` and the assembled estimator.
//!
//! `ψ` solves the full problem with homogeneous Robin data, terminal data
//! `g` and source `½ Σ_{i≠j} A_ij ∂²_ij φ`, so
//!
//! ```text
//! ψ(t, x) = E[∫_t^T e^{−ρ(s−t) + Σ c_k L^k_s} Σ_{i<j} A_ij ∂²_ij φ(s, X_s) ds]
//!         + E[e^{−ρ(T−t) + Σ c_k L^k_T} g(X_T)]
//! ```
//!
//! along correlated paths. The mixed derivatives of `φ` are tabulated once
//! on a space-time lattice and interpolated multilinearly.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cross::{cross_mc_samples, CrossKernel, CrossMode, CrossTolerances};
use super::{
    collect_samples, estimate_varphi_factorized, prepare, BoundaryDerivatives, EstimateResult,
    EstimatorError, McBudget, QueryPoint, Scratch,
};
use crate::model::{ModelParams, ProblemSpec};
use crate::paths::{reflect_into, DriverKind, DriverSampler, TimeGrid};
use crate::quad::gauss_legendre_on;
use crate::rng::{derive_seed, substream, Purpose};
use crate::stats::{par_collect, par_collect_with, summarize};

/// Source of `∂²φ/∂x_i∂x_j` values for the ψ estimator.
pub trait CrossDerivativeProvider: Sync {
    fn cross(&self, i: usize, j: usize, s: f64, x: &[f64]) -> f64;
}

impl<F> CrossDerivativeProvider for F
where
    F: Fn(usize, usize, f64, &[f64]) -> f64 + Sync,
{
    fn cross(&self, i: usize, j: usize, s: f64, x: &[f64]) -> f64 {
        self(i, j, s, x)
    }
}

/// Provider for problems whose source term vanishes.
#[derive(Debug, Clone, Copy)]
pub struct NoCrossTerms;

impl CrossDerivativeProvider for NoCrossTerms {
    fn cross(&self, _: usize, _: usize, _: f64, _: &[f64]) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Spatial spacing, the same on every axis.
    pub spacing: f64,
    /// Number of time nodes on `[t0, T]`, both ends included.
    pub time_nodes: usize,
    /// Spatial extent beyond the farthest query, in units of `σ̃_i √(T − t0)`.
    pub width: f64,
    /// Defaults to quadrature for d = 2 and Monte Carlo otherwise.
    pub mode: Option<CrossMode>,
    /// Paths per lattice node in Monte Carlo mode.
    pub mc_paths: usize,
    pub mc_dt: f64,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            spacing: 0.125,
            time_nodes: 11,
            width: 5.0,
            mode: None,
            mc_paths: 4_000,
            mc_dt: 1e-2,
        }
    }
}

/// Tabulated `∂²φ/∂x_i∂x_j` on `[t0, T] × Π_a [0, (n_a − 1)·spacing]`.
#[derive(Debug)]
pub struct CrossLattice {
    times: Vec<f64>,
    spacing: f64,
    dims: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    /// Per pair, values indexed time-major then by axis in order.
    values: Vec<Vec<f64>>,
    clamped: AtomicU64,
}

impl CrossLattice {
    /// Tabulates the pairs `i < j` with `A_ij ≠ 0`. `extent[a]` is the
    /// smallest upper edge wanted on axis `a`.
    pub fn build(
        params: &ModelParams,
        spec: &ProblemSpec,
        t0: f64,
        extent: &[f64],
        lat: &LatticeSpec,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        if !(lat.spacing > 0.0) || lat.time_nodes < 2 {
            return Err(EstimatorError::BadBudget(format!(
                "lattice needs spacing > 0 and at least 2 time nodes, got {} and {}",
                lat.spacing, lat.time_nodes
            )));
        }
        let d = params.d;
        if d > 8 {
            return Err(EstimatorError::BadBudget(format!(
                "lattice supports d <= 8, got d = {d}"
            )));
        }
        let a = params.diffusion_matrix();
        let pairs: Vec<(usize, usize)> = (0..d)
            .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
            .filter(|&(i, j)| a[i][j] != 0.0)
            .collect();
        let dims: Vec<usize> = extent
            .iter()
            .map(|e| ((e / lat.spacing).ceil() as usize).max(1) + 1)
            .collect();
        let t1 = params.horizon;
        let times: Vec<f64> = (0..lat.time_nodes)
            .map(|k| {
                if k + 1 == lat.time_nodes {
                    t1
                } else {
                    t0 + (t1 - t0) * k as f64 / (lat.time_nodes - 1) as f64
                }
            })
            .collect();
        let mode = lat.mode.unwrap_or(if d == 2 {
            CrossMode::Quadrature
        } else {
            CrossMode::Mc
        });
        let derivs = BoundaryDerivatives::new(spec);
        let values = match mode {
            CrossMode::Quadrature => {
                if d != 2 {
                    return Err(EstimatorError::BadQuery(format!(
                        "quadrature lattice needs d = 2, got d = {d}"
                    )));
                }
                let tol = CrossTolerances::default();
                let kernel =
                    CrossKernel::new(params, spec, &derivs, &tol).with_first_passage_rate();
                let mut table = Vec::with_capacity(dims[0] * dims[1] * times.len());
                for &s in &times {
                    table.extend(quadrature_slice(params, &kernel, s, &dims, lat.spacing)?);
                }
                if pairs.is_empty() {
                    Vec::new()
                } else {
                    vec![table]
                }
            }
            CrossMode::Mc => {
                let budget = McBudget::new(lat.mc_paths, lat.mc_dt);
                let per_time: usize = dims.iter().product();
                let mut out = Vec::with_capacity(pairs.len());
                for (pi, &(i, j)) in pairs.iter().enumerate() {
                    let mut table = Vec::with_capacity(per_time * times.len());
                    for (ti, &s) in times.iter().enumerate() {
                        for flat in 0..per_time {
                            let x = unflatten(flat, &dims, lat.spacing);
                            let q = QueryPoint::new(s, &x);
                            let grid = TimeGrid::uniform(s, t1, budget.dt)?;
                            let node = ((pi * times.len() + ti) * per_time + flat) as u64;
                            let samples = cross_mc_samples(
                                params,
                                spec,
                                &derivs,
                                &q,
                                i,
                                j,
                                &grid,
                                &budget,
                                derive_seed(seed, node),
                            )?;
                            table.push(summarize(&samples).mean);
                        }
                    }
                    out.push(table);
                }
                out
            }
        };
        Ok(Self {
            times,
            spacing: lat.spacing,
            dims,
            pairs,
            values,
            clamped: AtomicU64::new(0),
        })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn node_count(&self) -> usize {
        self.times.len() * self.dims.iter().product::<usize>()
    }

    /// Upper spatial edge on each axis.
    pub fn extent(&self) -> Vec<f64> {
        self.dims
            .iter()
            .map(|n| (n - 1) as f64 * self.spacing)
            .collect()
    }

    /// Number of lookups that fell outside the lattice and were clamped.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    fn interpolate(&self, table: &[f64], s: f64, x: &[f64]) -> f64 {
        let mut outside = false;
        let nt = self.times.len();
        let (t0, t1) = (self.times[0], self.times[nt - 1]);
        if s < t0 - 1e-12 || s > t1 + 1e-12 {
            outside = true;
        }
        let ts = ((s.clamp(t0, t1) - t0) / (t1 - t0) * (nt - 1) as f64).max(0.0);
        let tk = (ts.floor() as usize).min(nt - 2);
        let tw = ts - tk as f64;
        let d = self.dims.len();
        let mut cell = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for a in 0..d {
            let n = self.dims[a];
            let hi = (n - 1) as f64 * self.spacing;
            if x[a] > hi {
                outside = true;
            }
            let p = (x[a].clamp(0.0, hi) / self.spacing).max(0.0);
            let k = (p.floor() as usize).min(n.saturating_sub(2));
            cell[a] = k;
            frac[a] = if n > 1 { p - k as f64 } else { 0.0 };
        }
        if outside {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        let per_time: usize = self.dims.iter().product();
        let mut total = 0.0;
        for corner in 0..(1usize << (d + 1)) {
            let mut w = if corner & 1 == 0 { 1.0 - tw } else { tw };
            let mut idx = (tk + (corner & 1)) * per_time;
            let mut stride = per_time;
            for a in 0..d {
                stride /= self.dims[a];
                let up = (corner >> (a + 1)) & 1;
                w *= if up == 0 { 1.0 - frac[a] } else { frac[a] };
                idx += (cell[a] + up).min(self.dims[a] - 1) * stride;
            }
            if w != 0.0 {
                total += w * table[idx];
            }
        }
        total
    }
}

impl CrossDerivativeProvider for CrossLattice {
    /// NaN for pairs that were not tabulated.
    fn cross(&self, i: usize, j: usize, s: f64, x: &[f64]) -> f64 {
        let key = (i.min(j), i.max(j));
        match self.pairs.iter().position(|p| *p == key) {
            Some(k) => self.interpolate(&self.values[k], s, x),
            None => f64::NAN,
        }
    }
}

fn unflatten(mut flat: usize, dims: &[usize], spacing: f64) -> Vec<f64> {
    let mut x = vec![0.0; dims.len()];
    for a in (0..dims.len()).rev() {
        x[a] = (flat % dims[a]) as f64 * spacing;
        flat /= dims[a];
    }
    x
}

/// One time slice of `∂²_12 φ` on the spatial lattice. The outer integral
/// is a composite Gauss–Legendre rule in `v = √(s − t)` with panels refined
/// towards `v = 0`, where the first-passage kernels of nearby nodes peak;
/// the kernel factors `J_ℓ` and `dK_ℓ` each depend on one coordinate only.
fn quadrature_slice(
    params: &ModelParams,
    kernel: &CrossKernel<'_>,
    s0: f64,
    dims: &[usize],
    spacing: f64,
) -> Result<Vec<f64>, EstimatorError> {
    let vmax = (params.horizon - s0).max(0.0).sqrt();
    let mut rule = Vec::new();
    if vmax > 0.0 {
        let edges = [
            0.0,
            1.0 / 64.0,
            1.0 / 32.0,
            1.0 / 16.0,
            0.125,
            0.25,
            0.5,
            1.0,
        ];
        for w in edges.windows(2) {
            rule.extend(gauss_legendre_on(8, w[0] * vmax, w[1] * vmax));
        }
    }
    let nq = rule.len();
    let mut d_terms = Vec::with_capacity(2);
    for l in 0..2 {
        let b = 1 - l;
        let (nl, nb) = (dims[l], dims[b]);
        // Row q holds the kernel at node q over the coordinate grid.
        let jv = par_collect(nq * nb, |idx| {
            let (q, k) = (idx / nb, idx % nb);
            let v = rule[q].0;
            kernel.j_value(l, s0, s0 + v * v, k as f64 * spacing)
        })
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
        let kr = par_collect(nq * nl, |idx| {
            let (q, k) = (idx / nl, idx % nl);
            let v = rule[q].0;
            kernel.k_rate(l, s0, s0 + v * v, k as f64 * spacing)
        })
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
        let atom = (0..nb)
            .map(|k| kernel.j_value(l, s0, s0, k as f64 * spacing))
            .collect::<Result<Vec<f64>, _>>()?;
        let mut dl = vec![0.0; nl * nb];
        for kl in 0..nl {
            for kb in 0..nb {
                let mut acc = if kl == 0 { atom[kb] } else { 0.0 };
                for (q, (v, w)) in rule.iter().enumerate() {
                    acc += w
                        * 2.0
                        * v
                        * (-params.rho * v * v).exp()
                        * kr[q * nl + kl]
                        * jv[q * nb + kb];
                }
                dl[kl * nb + kb] = acc;
            }
        }
        d_terms.push(dl);
    }
    // Lay out as [x1][x2].
    let (n1, n2) = (dims[0], dims[1]);
    let mut out = vec![0.0; n1 * n2];
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            // d_terms[0] is indexed [x1][x2], d_terms[1] is [x2][x1].
            out[k1 * n2 + k2] = d_terms[0][k1 * n2 + k2] + d_terms[1][k2 * n1 + k1];
        }
    }
    Ok(out)
}

/// Monte Carlo estimate of `ψ(t, x)` along correlated paths. The time
/// integral of the source uses the trapezoid rule on the path grid.
pub fn estimate_psi(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    budget: &McBudget,
    seed: u64,
    dphi: &dyn CrossDerivativeProvider,
) -> Result<EstimateResult, EstimatorError> {
    let started = Instant::now();
    let grid = prepare(params, spec, q, budget)?;
    let a = params.diffusion_matrix();
    let pairs: Vec<(usize, usize, f64)> = if params.is_diagonal() || spec.boundary_data_vanishes() {
        Vec::new()
    } else {
        (0..params.d)
            .flat_map(|i| (i + 1..params.d).map(move |j| (i, j)))
            .filter(|&(i, j)| a[i][j] != 0.0)
            .map(|(i, j)| (i, j, a[i][j]))
            .collect()
    };
    if pairs.is_empty() && spec.g.is_zero() {
        return Ok(EstimateResult::exact(
            0.0,
            budget.n_paths,
            budget.dt,
            seed,
            started,
        ));
    }
    let sampler = DriverSampler::new(params, DriverKind::Correlated, budget.segment_max);
    let times = grid.times();
    let n = grid.n_steps();
    let results = par_collect_with(
        budget.n_paths,
        || Scratch::new(params.d, n, budget.segment_max),
        |ws, p| {
            let mut rng = substream(seed, Purpose::Psi, p as u64);
            sampler.sample_into(&grid, &mut rng, &mut ws.driver);
            reflect_into(&q.x, &ws.driver, budget.segment_max, &mut ws.path)?;
            ws.accumulate_cl(&params.c);
            let mut total = 0.0;
            if !pairs.is_empty() {
                let mut prev = 0.0;
                for k in 0..=n {
                    ws.load(times[k], k);
                    let x = &ws.vals[1..];
                    let source: f64 = pairs
                        .iter()
                        .map(|&(i, j, aij)| aij * dphi.cross(i, j, times[k], x))
                        .sum();
                    let g = (-params.rho * (times[k] - q.t) + ws.cl[k]).exp() * source;
                    if k > 0 {
                        total += 0.5 * (prev + g) * (times[k] - times[k - 1]);
                    }
                    prev = g;
                }
            }
            if !spec.g.is_zero() {
                ws.load(times[n], n);
                total += (-params.rho * (times[n] - q.t) + ws.cl[n]).exp()
                    * spec.g.eval_slice(&ws.vals)?;
            }
            Ok(total)
        },
    );
    let samples = collect_samples(results)?;
    Ok(EstimateResult::from_samples(
        &samples, budget.dt, seed, started,
    ))
}

/// Budgets of the decomposed estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionBudget {
    /// Paths for ψ and for the inner expectation of φ.
    pub n_paths: usize,
    pub dt: f64,
    /// Initial number of outer quadrature nodes of the factorized φ.
    pub n_time_nodes: usize,
    pub segment_max: bool,
    pub lattice: LatticeSpec,
}

impl Default for DecompositionBudget {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            n_time_nodes: 32,
            segment_max: true,
            lattice: LatticeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposedEstimate {
    pub phi: EstimateResult,
    pub psi: EstimateResult,
    pub u: EstimateResult,
}

/// Decomposed solver for a fixed problem; the lattice of mixed derivatives
/// is built once and shared by all query points.
pub struct DecomposedSolver<'a> {
    params: &'a ModelParams,
    spec: &'a ProblemSpec,
    budget: DecompositionBudget,
    seed: u64,
    lattice: Option<CrossLattice>,
}

impl<'a> DecomposedSolver<'a> {
    pub fn new(
        params: &'a ModelParams,
        spec: &'a ProblemSpec,
        budget: DecompositionBudget,
        queries: &[QueryPoint],
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        for q in queries {
            q.check(params)?;
        }
        let needs_lattice =
            !params.is_diagonal() && !spec.boundary_data_vanishes() && !queries.is_empty();
        let lattice = if needs_lattice {
            let t0 = queries.iter().map(|q| q.t).fold(f64::INFINITY, f64::min);
            let span = params.horizon - t0;
            let extent: Vec<f64> = (0..params.d)
                .map(|a| {
                    let far = queries.iter().map(|q| q.x[a]).fold(0.0, f64::max);
                    far + budget.lattice.width * params.effective_vol(a) * span.sqrt()
                        + params.mu[a].abs() * span
                })
                .collect();
            Some(CrossLattice::build(
                params,
                spec,
                t0,
                &extent,
                &budget.lattice,
                seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            params,
            spec,
            budget,
            seed,
            lattice,
        })
    }

    pub fn lattice(&self) -> Option<&CrossLattice> {
        self.lattice.as_ref()
    }

    pub fn estimate(&self, q: &QueryPoint) -> Result<DecomposedEstimate, EstimatorError> {
        let started = Instant::now();
        let phi = estimate_varphi_factorized(
            self.params,
            self.spec,
            q,
            self.budget.n_paths,
            self.budget.n_time_nodes,
            self.seed,
        )?;
        let mc = McBudget {
            n_paths: self.budget.n_paths,
            dt: self.budget.dt,
            segment_max: self.budget.segment_max,
        };
        let before = self.lattice.as_ref().map_or(0, CrossLattice::clamped_count);
        let psi = match &self.lattice {
            Some(lat) => estimate_psi(self.params, self.spec, q, &mc, self.seed, lat)?,
            None => estimate_psi(self.params, self.spec, q, &mc, self.seed, &NoCrossTerms)?,
        };
        if let Some(lat) = &self.lattice {
            let clamped = lat.clamped_count() - before;
            if clamped > 0 {
                log::warn!(
                    "{clamped} lattice lookups fell outside the tabulated box and were clamped"
                );
            }
        }
        let mut u = phi.plus(&psi);
        u.dt = self.budget.dt;
        u.n_paths = self.budget.n_paths;
        u.wall_time = started.elapsed().as_secs_f64();
        Ok(DecomposedEstimate { phi, psi, u })
    }
}

/// `u = φ + ψ` at one query point.
pub fn estimate_u_decomposed(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    budget: &DecompositionBudget,
    seed: u64,
) -> Result<EstimateResult, EstimatorError> {
    let solver =
        DecomposedSolver::new(params, spec, budget.clone(), std::slice::from_ref(q), seed)?;
    Ok(solver.estimate(q)?.u)
}
