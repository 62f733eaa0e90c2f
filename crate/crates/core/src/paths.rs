//! Driver simulation, Skorokhod reflection and pathwise functionals.
//!
//! Each state component is driven by `W̃^i_s = −μ_i (s−t) − Σ_k σ_ik (W^k_s − W^k_t)`.
//! The reflected state and its local time follow from the running maximum
//! `M^i_s = max_{[t,s]} W̃^i`:
//!
//! ```text
//! L^i_s = (M^i_s − x_i)⁺,    X^i_s = x_i − W̃^i_s + L^i_s = max(x_i, M^i_s) − W̃^i_s
//! ```
//!
//! so no penalization or projection step is involved. On a time grid the
//! running maximum can be taken over the grid values, or over exact
//! Brownian-bridge maxima of every segment, which makes `(W̃, M)` at the
//! grid nodes exact in law for each component.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::ModelParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("negative start x[{component}] = {value}")]
    NegativeStart { component: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid time grid: {0}")]
    BadGrid(String),
}

/// Strictly increasing time nodes `t0 = s_0 < s_1 < ... < s_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n = ceil((T − t0)/dt)` steps. `t0 == T` gives the
    /// degenerate single-node grid.
    pub fn uniform(t0: f64, t_end: f64, dt: f64) -> Result<Self, PathError> {
        if !(dt > 0.0) || !(t_end >= t0) || !t0.is_finite() || !t_end.is_finite() {
            return Err(PathError::BadGrid(format!(
                "need dt > 0 and t0 <= T (t0={t0}, T={t_end}, dt={dt})"
            )));
        }
        let span = t_end - t0;
        let n = if span == 0.0 {
            0
        } else {
            ((span / dt) - 1e-9).ceil().max(1.0) as usize
        };
        Ok(Self::with_steps(t0, t_end, n))
    }

    pub fn with_steps(t0: f64, t_end: f64, n: usize) -> Self {
        if n == 0 {
            return Self { times: vec![t0] };
        }
        let h = (t_end - t0) / n as f64;
        let mut times: Vec<f64> = (0..=n).map(|k| t0 + h * k as f64).collect();
        times[n] = t_end;
        Self { times }
    }

    pub fn from_nodes(times: Vec<f64>) -> Result<Self, PathError> {
        if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PathError::BadGrid(
                "nodes must be strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Length of step `k` (from node `k` to node `k+1`).
    pub fn step(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }
}

/// Sampled drivers `W̃^i` at the grid nodes, plus optional per-segment
/// maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPath {
    /// `d` rows of `n_steps + 1` values, each starting at 0.
    pub wtilde: Vec<Vec<f64>>,
    /// `d` rows of `n_steps` segment maxima.
    pub seg_max: Option<Vec<Vec<f64>>>,
}

impl DriverPath {
    pub fn zeros(d: usize, n_steps: usize, with_seg_max: bool) -> Self {
        Self {
            wtilde: vec![vec![0.0; n_steps + 1]; d],
            seg_max: with_seg_max.then(|| vec![vec![0.0; n_steps]; d]),
        }
    }

    pub fn seg_max_of(&self, i: usize) -> Option<&[f64]> {
        self.seg_max.as_ref().map(|s| s[i].as_slice())
    }
}

/// Reflected state and local time at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedPath {
    pub x: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
}

impl ReflectedPath {
    pub fn zeros(d: usize, n_steps: usize) -> Self {
        Self {
            x: vec![vec![0.0; n_steps + 1]; d],
            l: vec![vec![0.0; n_steps + 1]; d],
        }
    }

    /// Checks nonnegativity, monotone local time starting at zero and the
    /// discrete flat-off-boundary condition `Σ_k x_k (l_k − l_{k−1}) ≤ eps`.
    pub fn check_invariants(&self, eps_flat: f64) -> Result<(), String> {
        for (i, (x, l)) in self.x.iter().zip(&self.l).enumerate() {
            if let Some(k) = x.iter().position(|v| *v < 0.0) {
                return Err(format!("x[{i}][{k}] = {} < 0", x[k]));
            }
            if l[0] != 0.0 {
                return Err(format!("l[{i}][0] = {} != 0", l[0]));
            }
            if let Some(k) = l.windows(2).position(|w| w[1] < w[0]) {
                return Err(format!("l[{i}] decreases at step {k}"));
            }
            let defect = flat_off_boundary_defect(x, l);
            if defect > eps_flat {
                return Err(format!("component {i}: flat-off-boundary defect {defect}"));
            }
        }
        Ok(())
    }
}

/// `Σ_k x_k (l_k − l_{k−1})`: local-time mass charged while away from 0.
pub fn flat_off_boundary_defect(x: &[f64], l: &[f64]) -> f64 {
    x.iter()
        .skip(1)
        .zip(l.windows(2))
        .map(|(xk, w)| xk * (w[1] - w[0]))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    /// All components share one m-dimensional Brownian motion.
    Correlated,
    /// Each component has its own Brownian motion with volatility `σ̃_i`.
    Independent,
}

/// Reusable driver sampler for one model.
#[derive(Debug, Clone)]
pub struct DriverSampler {
    kind: DriverKind,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    vols: Vec<f64>,
    segment_max: bool,
}

impl DriverSampler {
    pub fn new(params: &ModelParams, kind: DriverKind, segment_max: bool) -> Self {
        Self {
            kind,
            mu: params.mu.clone(),
            sigma: params.sigma.clone(),
            vols: params.effective_vols(),
            segment_max,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn segment_max(&self) -> bool {
        self.segment_max
    }

    pub fn vols(&self) -> &[f64] {
        &self.vols
    }

    pub fn new_path(&self, grid: &TimeGrid) -> DriverPath {
        DriverPath::zeros(self.dim(), grid.n_steps(), self.segment_max)
    }

    /// Fills `out` with one sample. Per step the draws are: the Gaussian
    /// increments (m for correlated, d for independent drivers), then one
    /// uniform per component for the bridge maximum.
    pub fn sample_into<R: Rng + ?Sized>(&self, grid: &TimeGrid, rng: &mut R, out: &mut DriverPath) {
        let d = self.dim();
        let m = self.sigma.first().map_or(0, Vec::len);
        let mut z = vec![0.0; m.max(d)];
        for i in 0..d {
            out.wtilde[i][0] = 0.0;
        }
        for k in 0..grid.n_steps() {
            let dt = grid.step(k);
            let sdt = dt.sqrt();
            match self.kind {
                DriverKind::Correlated => {
                    for zk in z.iter_mut().take(m) {
                        *zk = rng.sample(StandardNormal);
                    }
                    for i in 0..d {
                        let noise: f64 = self.sigma[i].iter().zip(&z).map(|(s, zk)| s * zk).sum();
                        out.wtilde[i][k + 1] = out.wtilde[i][k] - self.mu[i] * dt - sdt * noise;
                    }
                }
                DriverKind::Independent => {
                    for i in 0..d {
                        let zi: f64 = rng.sample(StandardNormal);
                        out.wtilde[i][k + 1] =
                            out.wtilde[i][k] - self.mu[i] * dt - sdt * self.vols[i] * zi;
                    }
                }
            }
            if let Some(seg) = out.seg_max.as_mut() {
                for i in 0..d {
                    seg[i][k] = sample_segment_max(
                        out.wtilde[i][k],
                        out.wtilde[i][k + 1],
                        dt,
                        self.vols[i],
                        rng,
                    );
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, grid: &TimeGrid, rng: &mut R) -> DriverPath {
        let mut out = self.new_path(grid);
        self.sample_into(grid, rng, &mut out);
        out
    }
}

/// Drivers sharing the model's m-dimensional Brownian motion.
pub fn simulate_drivers_correlated<R: Rng + ?Sized>(
    params: &ModelParams,
    grid: &TimeGrid,
    rng: &mut R,
    segment_max: bool,
) -> DriverPath {
    DriverSampler::new(params, DriverKind::Correlated, segment_max).sample(grid, rng)
}

/// Mutually independent drivers with the same marginal laws.
pub fn simulate_drivers_independent<R: Rng + ?Sized>(
    params: &ModelParams,
    grid: &TimeGrid,
    rng: &mut R,
    segment_max: bool,
) -> DriverPath {
    DriverSampler::new(params, DriverKind::Independent, segment_max).sample(grid, rng)
}

/// Maximum of a Brownian bridge from `w_left` to `w_right` over a segment
/// of length `dt` with volatility `vol`, given the uniform draw `u ∈ (0, 1]`.
#[inline]
pub fn bridge_max_from_uniform(w_left: f64, w_right: f64, dt: f64, vol: f64, u: f64) -> f64 {
    let gap = w_right - w_left;
    let m = 0.5 * (w_left + w_right + (gap * gap - 2.0 * vol * vol * dt * u.ln()).sqrt());
    m.max(w_left).max(w_right)
}

/// Exact draw of the segment maximum.
#[inline]
pub fn sample_segment_max<R: Rng + ?Sized>(
    w_left: f64,
    w_right: f64,
    dt: f64,
    vol: f64,
    rng: &mut R,
) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    bridge_max_from_uniform(w_left, w_right, dt, vol, u)
}

/// Running maximum `M_k` of one driver, starting from `M_0 = W̃_0 = 0`.
pub fn running_max_into(wtilde: &[f64], seg_max: Option<&[f64]>, out: &mut [f64]) {
    let mut m = wtilde[0];
    out[0] = m;
    for k in 1..wtilde.len() {
        m = m.max(wtilde[k]);
        if let Some(seg) = seg_max {
            m = m.max(seg[k - 1]);
        }
        out[k] = m;
    }
}

/// Applies the Skorokhod map componentwise.
pub fn skorokhod_reflect(
    x0: &[f64],
    driver: &DriverPath,
    use_segment_max: bool,
) -> Result<ReflectedPath, PathError> {
    let n = driver
        .wtilde
        .first()
        .map_or(0, |w| w.len().saturating_sub(1));
    let mut out = ReflectedPath::zeros(x0.len(), n);
    reflect_into(x0, driver, use_segment_max, &mut out)?;
    Ok(out)
}

/// In-place variant of [`skorokhod_reflect`].
pub fn reflect_into(
    x0: &[f64],
    driver: &DriverPath,
    use_segment_max: bool,
    out: &mut ReflectedPath,
) -> Result<(), PathError> {
    if x0.len() != driver.wtilde.len() {
        return Err(PathError::LengthMismatch {
            left: x0.len(),
            right: driver.wtilde.len(),
        });
    }
    for (i, &xi) in x0.iter().enumerate() {
        if !(xi >= 0.0) {
            return Err(PathError::NegativeStart {
                component: i,
                value: xi,
            });
        }
        let seg = if use_segment_max {
            driver.seg_max_of(i)
        } else {
            None
        };
        let w = &driver.wtilde[i];
        // Reuse x[i] as scratch for the running max.
        running_max_into(w, seg, &mut out.x[i]);
        for k in 0..w.len() {
            let m = out.x[i][k];
            out.l[i][k] = (m - xi).max(0.0);
            out.x[i][k] = xi.max(m) - w[k];
        }
    }
    Ok(())
}

/// Right-endpoint Riemann–Stieltjes sum `Σ_k values[k] (l[k] − l[k−1])`.
#[allow(non_snake_case)]
pub fn stieltjes_against_L(values: &[f64], l: &[f64]) -> Result<f64, PathError> {
    if values.len() != l.len() {
        return Err(PathError::LengthMismatch {
            left: values.len(),
            right: l.len(),
        });
    }
    Ok(values
        .iter()
        .skip(1)
        .zip(l.windows(2))
        .map(|(v, w)| v * (w[1] - w[0]))
        .sum())
}

/// First grid index at which the running maximum of `W̃^i` reaches `level`,
/// i.e. the grid image of `τ = inf{s ≥ t : W̃^i_s = level}`. With segment
/// maxima, a crossing inside segment `(k−1, k]` is reported as `k`.
pub fn first_hitting_index(wtilde: &[f64], seg_max: Option<&[f64]>, level: f64) -> Option<usize> {
    if wtilde.first().is_some_and(|w| *w >= level) {
        return Some(0);
    }
    (1..wtilde.len()).find(|&k| wtilde[k] >= level || seg_max.is_some_and(|s| s[k - 1] >= level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};

    fn driver(w: &[f64]) -> DriverPath {
        DriverPath {
            wtilde: vec![w.to_vec()],
            seg_max: None,
        }
    }

    #[test]
    fn reflection_examples() {
        let p = skorokhod_reflect(&[1.0], &driver(&[0.0, -0.5, -1.0]), false).unwrap();
        assert_eq!(p.l[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(p.x[0], vec![1.0, 1.5, 2.0]);
        let p = skorokhod_reflect(&[1.0], &driver(&[0.0, 0.6, 1.2]), false).unwrap();
        assert_eq!(p.x[0][0], 1.0);
        assert!((p.x[0][1] - 0.4).abs() < 1e-15);
        assert_eq!(p.x[0][2], 0.0);
        assert_eq!(p.l[0][..2], [0.0, 0.0]);
        assert!((p.l[0][2] - 0.2).abs() < 1e-15);
        assert!(matches!(
            skorokhod_reflect(&[-0.1], &driver(&[0.0, 0.1]), false),
            Err(PathError::NegativeStart { .. })
        ));
    }

    #[test]
    fn stieltjes_examples() {
        let l = [0.0, 0.0, 0.2, 0.5];
        assert!((stieltjes_against_L(&[1.0; 4], &l).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            stieltjes_against_L(&[3.0, -1.0, 7.0], &[0.4; 3]).unwrap(),
            0.0
        );
        let v = stieltjes_against_L(&[0.0, 1.0, 2.0, 3.0], &[0.0, 0.1, 0.1, 0.4]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(matches!(
            stieltjes_against_L(&[1.0], &[0.0, 1.0]),
            Err(PathError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn hitting_index_examples() {
        assert_eq!(first_hitting_index(&[0.0, -0.3], None, 0.0), Some(0));
        assert_eq!(first_hitting_index(&[0.0, 0.6, 1.2], None, 1.0), Some(2));
        assert_eq!(first_hitting_index(&[0.0, 0.6, 0.7], None, 1.0), None);
        assert_eq!(
            first_hitting_index(&[0.0, 0.6, 0.7], Some(&[0.65, 1.05]), 1.0),
            Some(2)
        );
    }

    #[test]
    fn bridge_max_limits() {
        let m = bridge_max_from_uniform(0.2, -0.4, 0.01, 1.0, 1.0);
        assert!((m - 0.2).abs() < 1e-15);
        let mut rng = substream(1, Purpose::Test, 0);
        for _ in 0..10_000 {
            let m = sample_segment_max(0.3, -0.1, 0.05, 2.0, &mut rng);
            assert!(m >= 0.3);
        }
    }

    #[test]
    fn uniform_grid_shape() {
        let g = TimeGrid::uniform(0.25, 1.0, 1e-3).unwrap();
        assert_eq!(g.n_steps(), 750);
        assert_eq!(g.t0(), 0.25);
        assert_eq!(g.t_end(), 1.0);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(TimeGrid::uniform(1.0, 1.0, 1e-3).unwrap().n_steps(), 0);
        assert!(TimeGrid::uniform(0.0, 1.0, 0.0).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
    }
}
