//! Feynman–Kac estimators of the solution `u`, of the auxiliary solution
//! `φ` (no cross-derivative terms, original boundary data, zero terminal
//! data) and of its derivatives, of the homogenized remainder `ψ`, and of
//! the assembled `u = φ + ψ`.

mod cross;
mod naive;
mod psi;
mod residual;
mod varphi;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{local_time_mgf, ComponentLaw, DensityError};
use crate::expr::{Expr, ExprError};
use crate::model::{ModelError, ModelParams, ProblemSpec};
use crate::paths::{DriverPath, PathError, ReflectedPath, TimeGrid};
use crate::quad::QuadError;
use crate::stats::summarize;

pub use cross::{varphi_cross_second_derivative, CrossMode, CrossTolerances};
pub use naive::estimate_u_naive;
pub use psi::{
    estimate_psi, estimate_u_decomposed, CrossDerivativeProvider, CrossLattice, DecomposedEstimate,
    DecomposedSolver, DecompositionBudget, LatticeSpec, NoCrossTerms,
};
pub use residual::robin_residual;
pub use varphi::{estimate_varphi_factorized, estimate_varphi_gradient, estimate_varphi_stieltjes};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("quadrature budget exceeded: {0}")]
    QuadratureBudgetExceeded(QuadError),
    #[error("bad query point: {0}")]
    BadQuery(String),
    #[error("bad budget: {0}")]
    BadBudget(String),
    #[error("estimate is not finite ({0})")]
    NonFinite(String),
}

impl From<QuadError> for EstimatorError {
    fn from(e: QuadError) -> Self {
        EstimatorError::QuadratureBudgetExceeded(e)
    }
}

/// Point estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Seconds.
    pub wall_time: f64,
}

impl EstimateResult {
    pub fn from_samples(samples: &[f64], dt: f64, seed: u64, started: Instant) -> Self {
        let s = summarize(samples);
        Self {
            value: s.mean,
            std_error: s.std_error,
            n_paths: samples.len(),
            dt,
            seed,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }

    /// A deterministic value (zero standard error).
    pub fn exact(value: f64, n_paths: usize, dt: f64, seed: u64, started: Instant) -> Self {
        Self {
            value,
            std_error: 0.0,
            n_paths,
            dt,
            seed,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }

    /// Sum of two independent estimates; variances add.
    pub fn plus(&self, other: &EstimateResult) -> Self {
        Self {
            value: self.value + other.value,
            std_error: self.std_error.hypot(other.std_error),
            n_paths: self.n_paths.max(other.n_paths),
            dt: self.dt,
            seed: self.seed,
            wall_time: self.wall_time + other.wall_time,
        }
    }

    /// `|self − reference| ≤ k · SE`, with a tiny floor so that exact
    /// zero-variance estimates compare sensibly.
    pub fn within_se(&self, reference: f64, k: f64) -> bool {
        (self.value - reference).abs() <= k * self.std_error + 1e-12 * reference.abs().max(1.0)
    }
}

/// `(t, x)` at which a solution is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl QueryPoint {
    pub fn new(t: f64, x: &[f64]) -> Self {
        Self { t, x: x.to_vec() }
    }

    pub fn check(&self, params: &ModelParams) -> Result<(), EstimatorError> {
        if self.x.len() != params.d {
            return Err(EstimatorError::BadQuery(format!(
                "expected {} coordinates, got {}",
                params.d,
                self.x.len()
            )));
        }
        if !(self.t >= 0.0 && self.t <= params.horizon) {
            return Err(EstimatorError::BadQuery(format!(
                "t = {} outside [0, {}]",
                self.t, params.horizon
            )));
        }
        if let Some(i) = self.x.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(EstimatorError::BadQuery(format!(
                "x{} = {} outside the orthant",
                i + 1,
                self.x[i]
            )));
        }
        Ok(())
    }
}

/// Path budget of a Monte Carlo estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McBudget {
    pub n_paths: usize,
    pub dt: f64,
    /// Sample exact Brownian-bridge maxima inside each time step.
    pub segment_max: bool,
}

impl Default for McBudget {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            segment_max: true,
        }
    }
}

impl McBudget {
    pub fn new(n_paths: usize, dt: f64) -> Self {
        Self {
            n_paths,
            dt,
            segment_max: true,
        }
    }

    fn check(&self) -> Result<(), EstimatorError> {
        if self.n_paths < 2 {
            return Err(EstimatorError::BadBudget(format!(
                "n_paths must be at least 2, got {}",
                self.n_paths
            )));
        }
        if !(self.dt > 0.0) {
            return Err(EstimatorError::BadBudget(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

fn prepare(
    params: &ModelParams,
    spec: &ProblemSpec,
    q: &QueryPoint,
    budget: &McBudget,
) -> Result<TimeGrid, EstimatorError> {
    spec.check(params.d)?;
    q.check(params)?;
    budget.check()?;
    check_exponential_moments(params, q)?;
    Ok(TimeGrid::uniform(q.t, params.horizon, budget.dt)?)
}

/// Refuses to run when some `E[e^{c_i L^i_T}]` with `c_i > 0` is not a
/// finite, accurately computable number.
pub fn check_exponential_moments(
    params: &ModelParams,
    q: &QueryPoint,
) -> Result<(), EstimatorError> {
    if q.t >= params.horizon {
        return Ok(());
    }
    for i in 0..params.d {
        let c = params.c[i];
        if c > 0.0 {
            let law =
                ComponentLaw::new(params.mu[i], params.effective_vol(i), q.t, params.horizon)?;
            let m = local_time_mgf(&law, c, q.x[i])?;
            if !m.is_finite() || m > 1e300 {
                return Err(DensityError::Divergent { c, value: m }.into());
            }
        }
    }
    Ok(())
}

/// Scratch buffers of one worker.
pub(crate) struct Scratch {
    pub driver: DriverPath,
    pub path: ReflectedPath,
    pub vals: Vec<f64>,
    /// `Σ_j c_j L^j` at every node.
    pub cl: Vec<f64>,
}

impl Scratch {
    pub fn new(d: usize, n_steps: usize, segment_max: bool) -> Self {
        Self {
            driver: DriverPath::zeros(d, n_steps, segment_max),
            path: ReflectedPath::zeros(d, n_steps),
            vals: vec![0.0; d + 1],
            cl: vec![0.0; n_steps + 1],
        }
    }

    /// Fills `cl` from the current path.
    pub fn accumulate_cl(&mut self, c: &[f64]) {
        for (k, v) in self.cl.iter_mut().enumerate() {
            *v = c.iter().zip(&self.path.l).map(|(ci, l)| ci * l[k]).sum();
        }
    }

    /// Loads `[s, X_k]` into `vals`.
    pub fn load(&mut self, s: f64, k: usize) {
        self.vals[0] = s;
        for (i, x) in self.path.x.iter().enumerate() {
            self.vals[i + 1] = x[k];
        }
    }
}

/// Increment of the Stieltjes integrator of component `i` over step `k`:
/// `(e^{c L_k} − e^{c L_{k−1}})/c`, or `L_k − L_{k−1}` when `c = 0`. Using
/// the exponential integrator integrates the `e^{c L}` factor exactly.
#[inline]
pub(crate) fn integrator_step(l: &[f64], c: f64, k: usize) -> f64 {
    let (a, b) = (l[k - 1], l[k]);
    if b == a {
        0.0
    } else if c == 0.0 {
        b - a
    } else {
        ((c * b).exp() - (c * a).exp()) / c
    }
}

/// Derivative expressions of the boundary data, computed once.
#[derive(Debug, Clone)]
pub(crate) struct BoundaryDerivatives {
    /// `grad[l][j] = ∂f_l/∂x_j`.
    pub grad: Vec<Vec<Expr>>,
    /// `hess[l][i][j] = ∂²f_l/∂x_i∂x_j`.
    pub hess: Vec<Vec<Vec<Expr>>>,
}

impl BoundaryDerivatives {
    pub fn new(spec: &ProblemSpec) -> Self {
        let d = spec.f.len();
        let grad: Vec<Vec<Expr>> = spec
            .f
            .iter()
            .map(|f| (0..d).map(|j| f.derivative(j + 1)).collect())
            .collect();
        let hess = grad
            .iter()
            .map(|g| {
                g.iter()
                    .map(|gj| (0..d).map(|i| gj.derivative(i + 1)).collect())
                    .collect()
            })
            .collect();
        Self { grad, hess }
    }
}

/// Collects per-path results, returning the first error in path order.
pub(crate) fn collect_samples(
    results: Vec<Result<f64, EstimatorError>>,
) -> Result<Vec<f64>, EstimatorError> {
    let samples = results.into_iter().collect::<Result<Vec<f64>, _>>()?;
    if let Some(k) = samples.iter().position(|v| !v.is_finite()) {
        return Err(EstimatorError::NonFinite(format!(
            "path {k} produced {}",
            samples[k]
        )));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_error_adds_variances() {
        let t = Instant::now();
        let a = EstimateResult {
            std_error: 0.3,
            ..EstimateResult::exact(1.0, 10, 0.1, 1, t)
        };
        let b = EstimateResult {
            std_error: 0.4,
            ..EstimateResult::exact(2.0, 10, 0.1, 1, t)
        };
        let c = a.plus(&b);
        assert_eq!(c.value, 3.0);
        assert!((c.std_error - 0.5).abs() < 1e-15);
    }

    #[test]
    fn integrator_is_exact_for_exponential_weight() {
        let l = [0.0, 0.0, 0.3, 0.7];
        let total: f64 = (1..4).map(|k| integrator_step(&l, 0.5, k)).sum();
        assert!((total - ((0.35f64).exp() - 1.0) / 0.5).abs() < 1e-15);
        let total0: f64 = (1..4).map(|k| integrator_step(&l, 0.0, k)).sum();
        assert!((total0 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn query_guard() {
        let p = ModelParams {
            d: 2,
            m: 2,
            mu: vec![0.0; 2],
            sigma: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            rho: 0.0,
            c: vec![0.0; 2],
            horizon: 1.0,
        };
        assert!(QueryPoint::new(0.5, &[0.0, 1.0]).check(&p).is_ok());
        assert!(QueryPoint::new(0.5, &[-0.1, 1.0]).check(&p).is_err());
        assert!(QueryPoint::new(1.5, &[0.1, 1.0]).check(&p).is_err());
        assert!(QueryPoint::new(0.5, &[0.1]).check(&p).is_err());
    }
}
