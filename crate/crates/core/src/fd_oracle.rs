//! Finite-difference oracle for the two-dimensional problem on a truncated
//! square `[0, x_max]²`.
//!
//! In backward time `τ = T − t` the problem reads `∂_τ u = F0 u + F1 u + F2 u`
//! with `F0 = A_12 ∂_12` (plus any source) and `F_a = ½ A_aa ∂_aa + μ_a ∂_a − ½ρ`.
//! Space is discretized by centered second-order differences, the mixed
//! derivative by the four-point stencil, and the Robin condition on
//! `x_a = 0` by a ghost node `u_{−1} = u_1 − 2Δx (f_a − c_a u_0)`. Time
//! stepping is the Craig–Sneyd ADI scheme with `θ = ½`: `F0` is explicit,
//! `F1` and `F2` are implicit along grid lines, so each stage needs only
//! tridiagonal solves.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::estimators::{EstimateResult, QueryPoint};
use crate::expr::{Expr, ExprError};
use crate::model::{ModelParams, ProblemSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdError {
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("the finite-difference oracle needs d = 2, got d = {0}")]
    Dimension(usize),
    #[error("tridiagonal solve failed (zero pivot at row {row})")]
    LinearSolveFailure { row: usize },
    #[error("non-finite value in the solution at t = {t}")]
    NaNDetected { t: f64 },
    #[error("probe ({t}, {x:?}) outside the trusted domain (x ≤ {limit}, t in [0, T])")]
    ProbeOutOfDomain { t: f64, x: Vec<f64>, limit: f64 },
    #[error("{probes} probes but {estimates} estimates")]
    LengthMismatch { probes: usize, estimates: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Uniform tensor grid on `[0, x_max]² × [0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid2D {
    pub x_max: f64,
    /// Number of cells per axis (nodes `0..=n_x`).
    pub n_x: usize,
    pub dt_fd: f64,
    /// Keep every `store_every`-th time level (the first and last are always kept).
    pub store_every: usize,
}

impl Grid2D {
    pub fn new(x_max: f64, n_x: usize, dt_fd: f64) -> Self {
        Self {
            x_max,
            n_x,
            dt_fd,
            store_every: 1,
        }
    }

    /// Truncation `x_max = max query coordinate + 8 max_i σ̃_i √T`.
    pub fn for_queries(
        params: &ModelParams,
        queries: &[QueryPoint],
        n_x: usize,
        dt_fd: f64,
    ) -> Self {
        let far = queries
            .iter()
            .flat_map(|q| q.x.iter().copied())
            .fold(0.0, f64::max);
        let vol = params.effective_vols().into_iter().fold(0.0, f64::max);
        Self::new(far + 8.0 * vol * params.horizon.sqrt(), n_x, dt_fd)
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.n_x as f64
    }

    fn check(&self, horizon: f64) -> Result<(), FdError> {
        if self.n_x < 16 {
            return Err(FdError::BadGrid(format!(
                "n_x must be at least 16, got {}",
                self.n_x
            )));
        }
        if !(self.x_max > 0.0) {
            return Err(FdError::BadGrid(format!(
                "x_max must be positive, got {}",
                self.x_max
            )));
        }
        if !(self.dt_fd > 0.0) || self.dt_fd > horizon / 50.0 * (1.0 + 1e-12) {
            return Err(FdError::BadGrid(format!(
                "dt_fd must lie in (0, T/50], got {}",
                self.dt_fd
            )));
        }
        if self.store_every == 0 {
            return Err(FdError::BadGrid("store_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Condition on the far edges `x_a = x_max`.
#[derive(Debug, Clone)]
pub enum FarBc {
    /// Known solution values, an expression over `[t, x1, x2]`.
    DirichletKnown(Expr),
    /// Zero second normal derivative. Not monotone: near the far edges the
    /// solution may dip slightly below the range of the data, so only values
    /// within 80% of `x_max` are trusted.
    LinearExtrapolation,
}

/// Solution on the grid at the stored time levels.
#[derive(Debug, Clone, Serialize)]
pub struct FDSolution {
    pub x_max: f64,
    pub n_x: usize,
    /// Ascending times of the stored levels.
    pub times: Vec<f64>,
    /// One `(n_x + 1)²` slice per stored time, indexed `[i1 * (n_x + 1) + i2]`.
    pub values: Vec<Vec<f64>>,
    pub scheme: String,
}

impl FDSolution {
    pub fn dx(&self) -> f64 {
        self.x_max / self.n_x as f64
    }

    pub fn node(&self, level: usize, i1: usize, i2: usize) -> f64 {
        self.values[level][i1 * (self.n_x + 1) + i2]
    }

    /// Bilinear interpolation in space and linear interpolation in time.
    /// Probes beyond 80% of `x_max` are refused.
    pub fn value_at(&self, t: f64, x: &[f64]) -> Result<f64, FdError> {
        let limit = 0.8 * self.x_max;
        let (t0, t1) = (self.times[0], self.times[self.times.len() - 1]);
        let bad =
            x.len() != 2 || x.iter().any(|v| !(*v >= 0.0 && *v <= limit)) || !(t >= t0 && t <= t1);
        if bad {
            return Err(FdError::ProbeOutOfDomain {
                t,
                x: x.to_vec(),
                limit,
            });
        }
        let level = self
            .times
            .partition_point(|s| *s <= t)
            .clamp(1, self.times.len() - 1)
            - 1;
        let span = self.times[level + 1] - self.times[level];
        let wt = if span > 0.0 {
            (t - self.times[level]) / span
        } else {
            0.0
        };
        Ok((1.0 - wt) * self.spatial(level, x) + wt * self.spatial(level + 1, x))
    }

    fn spatial(&self, level: usize, x: &[f64]) -> f64 {
        let h = self.dx();
        let cell = |v: f64| {
            let p = v / h;
            let k = (p.floor() as usize).min(self.n_x - 1);
            (k, p - k as f64)
        };
        let (k1, w1) = cell(x[0]);
        let (k2, w2) = cell(x[1]);
        (1.0 - w1) * (1.0 - w2) * self.node(level, k1, k2)
            + w1 * (1.0 - w2) * self.node(level, k1 + 1, k2)
            + (1.0 - w1) * w2 * self.node(level, k1, k2 + 1)
            + w1 * w2 * self.node(level, k1 + 1, k2 + 1)
    }

    /// Index of the stored level nearest to `t`.
    pub fn level_near(&self, t: f64) -> usize {
        (0..self.times.len())
            .min_by(|&a, &b| {
                (self.times[a] - t)
                    .abs()
                    .total_cmp(&(self.times[b] - t).abs())
            })
            .unwrap_or(0)
    }

    /// Writes one stored level as CSV rows `x1,x2,value`.
    pub fn write_slice_csv<W: Write>(&self, level: usize, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x1,x2,value")?;
        let h = self.dx();
        for i1 in 0..=self.n_x {
            for i2 in 0..=self.n_x {
                writeln!(
                    out,
                    "{},{},{}",
                    i1 as f64 * h,
                    i2 as f64 * h,
                    self.node(level, i1, i2)
                )?;
            }
        }
        Ok(())
    }
}

/// Data of one linear solve: the Robin data, the far condition and whether
/// the cross term is present.
struct Component<'a> {
    f: [Option<&'a Expr>; 2],
    far: Far<'a>,
    cross: bool,
}

#[derive(Clone, Copy)]
enum Far<'a> {
    Known(&'a Expr),
    Zero,
    Extrapolate,
}

struct Stencil {
    n: usize,
    h: f64,
    a12: f64,
    /// Per axis: diffusion weight `½A_aa/h²`, drift weight `μ_a/2h`.
    alpha: [f64; 2],
    beta: [f64; 2],
    c: [f64; 2],
    half_rho: f64,
}

impl Stencil {
    fn new(params: &ModelParams, grid: &Grid2D) -> Self {
        let a = params.diffusion_matrix();
        let h = grid.dx();
        Self {
            n: grid.n_x,
            h,
            a12: a[0][1],
            alpha: [0.5 * a[0][0] / (h * h), 0.5 * a[1][1] / (h * h)],
            beta: [params.mu[0] / (2.0 * h), params.mu[1] / (2.0 * h)],
            c: [params.c[0], params.c[1]],
            half_rho: 0.5 * params.rho,
        }
    }

    fn idx(&self, i1: usize, i2: usize) -> usize {
        i1 * (self.n + 1) + i2
    }

    fn eval_at(e: &Expr, t: f64, x1: f64, x2: f64) -> Result<f64, FdError> {
        Ok(e.eval_slice(&[t, x1, x2])?)
    }

    /// Sets the far-edge nodes of `u` for time `t`.
    fn apply_far(&self, comp: &Component<'_>, t: f64, u: &mut [f64]) -> Result<(), FdError> {
        let n = self.n;
        let h = self.h;
        for k in 0..=n {
            for (i1, i2) in [(n, k), (k, n)] {
                let v = match comp.far {
                    Far::Known(e) => Self::eval_at(e, t, i1 as f64 * h, i2 as f64 * h)?,
                    Far::Zero => 0.0,
                    Far::Extrapolate => {
                        if i1 == n && i2 == n {
                            continue;
                        } else if i1 == n {
                            2.0 * u[self.idx(n - 1, i2)] - u[self.idx(n - 2, i2)]
                        } else {
                            2.0 * u[self.idx(i1, n - 1)] - u[self.idx(i1, n - 2)]
                        }
                    }
                };
                u[self.idx(i1, i2)] = v;
            }
        }
        if let Far::Extrapolate = comp.far {
            u[self.idx(n, n)] = 2.0 * u[self.idx(n - 1, n)] - u[self.idx(n - 2, n)];
        }
        Ok(())
    }

    /// Robin data `f_a` at the face point with the other coordinate `y`.
    fn robin(&self, comp: &Component<'_>, axis: usize, t: f64, y: f64) -> Result<f64, FdError> {
        match comp.f[axis] {
            None => Ok(0.0),
            Some(e) => {
                if axis == 0 {
                    Self::eval_at(e, t, 0.0, y)
                } else {
                    Self::eval_at(e, t, y, 0.0)
                }
            }
        }
    }

    /// Array over indices `−1..=n` on both axes holding `u`, its far
    /// values and the Robin ghost values at time `t`.
    fn extend(&self, comp: &Component<'_>, t: f64, u: &[f64]) -> Result<Vec<f64>, FdError> {
        let n = self.n;
        let m = n + 2;
        let h = self.h;
        let mut ext = vec![0.0; m * m];
        let at = |i1: isize, i2: isize| ((i1 + 1) as usize) * m + (i2 + 1) as usize;
        for i1 in 0..=n {
            for i2 in 0..=n {
                ext[at(i1 as isize, i2 as isize)] = u[self.idx(i1, i2)];
            }
        }
        // Ghost row below x2 = 0, then ghost column left of x1 = 0 (corner included).
        for i1 in 0..=n as isize {
            let f = self.robin(comp, 1, t, i1 as f64 * h)?;
            let (u0, u1) = (ext[at(i1, 0)], ext[at(i1, 1)]);
            ext[at(i1, -1)] = u1 - 2.0 * h * (f - self.c[1] * u0);
        }
        for i2 in -1..=n as isize {
            let f = self.robin(comp, 0, t, i2 as f64 * h)?;
            let (u0, u1) = (ext[at(0, i2)], ext[at(1, i2)]);
            ext[at(-1, i2)] = u1 - 2.0 * h * (f - self.c[0] * u0);
        }
        Ok(ext)
    }

    /// Explicit part: cross term on interior unknowns, plus optional source.
    fn f0(&self, comp: &Component<'_>, t: f64, u: &[f64], out: &mut [f64]) -> Result<(), FdError> {
        out.iter_mut().for_each(|v| *v = 0.0);
        if !comp.cross || self.a12 == 0.0 {
            return Ok(());
        }
        self.add_cross(comp, t, u, 1.0, out)
    }

    /// `out += scale · A_12 D_12 u` on the unknowns.
    fn add_cross(
        &self,
        comp: &Component<'_>,
        t: f64,
        u: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<(), FdError> {
        let n = self.n;
        let m = n + 2;
        let ext = self.extend(comp, t, u)?;
        let w = scale * self.a12 / (4.0 * self.h * self.h);
        for i1 in 0..n {
            for i2 in 0..n {
                let e = |a: usize, b: usize| ext[a * m + b];
                // Indices shifted by one in the extended array.
                let d = e(i1 + 2, i2 + 2) - e(i1 + 2, i2) - e(i1, i2 + 2) + e(i1, i2);
                out[self.idx(i1, i2)] += w * d;
            }
        }
        Ok(())
    }

    /// Tridiagonal coefficients `(lower, diag, upper)` of `L_a` on a line.
    fn line_coeffs(&self, axis: usize, far: Far<'_>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let (al, be) = (self.alpha[axis], self.beta[axis]);
        let mut lo = vec![al - be; n];
        let mut di = vec![-2.0 * al - self.half_rho; n];
        let mut up = vec![al + be; n];
        // Robin ghost folded into row 0.
        di[0] += (al - be) * 2.0 * self.h * self.c[axis];
        up[0] += al - be;
        lo[0] = 0.0;
        if let Far::Extrapolate = far {
            lo[n - 1] -= al + be;
            di[n - 1] += 2.0 * (al + be);
        }
        up[n - 1] = 0.0;
        (lo, di, up)
    }

    /// Affine operator `F_a u = L_a u + b_a(t)` on the unknowns, using the
    /// far values already stored in `u`.
    fn fa(
        &self,
        comp: &Component<'_>,
        axis: usize,
        t: f64,
        u: &[f64],
        out: &mut [f64],
    ) -> Result<(), FdError> {
        let n = self.n;
        let (lo, di, up) = self.line_coeffs(axis, comp.far);
        let b = self.boundary_terms(comp, axis, t)?;
        for line in 0..n {
            for k in 0..n {
                let get = |kk: usize| {
                    if axis == 0 {
                        u[self.idx(kk, line)]
                    } else {
                        u[self.idx(line, kk)]
                    }
                };
                let mut v = di[k] * get(k) + b[line * n + k];
                if k > 0 {
                    v += lo[k] * get(k - 1);
                }
                if k + 1 < n {
                    v += up[k] * get(k + 1);
                }
                let o = if axis == 0 {
                    self.idx(k, line)
                } else {
                    self.idx(line, k)
                };
                out[o] = v;
            }
        }
        Ok(())
    }

    /// Constant terms of `F_a` per line: Robin data at row 0, known far
    /// values at row `n − 1`.
    fn boundary_terms(
        &self,
        comp: &Component<'_>,
        axis: usize,
        t: f64,
    ) -> Result<Vec<f64>, FdError> {
        let n = self.n;
        let h = self.h;
        let (al, be) = (self.alpha[axis], self.beta[axis]);
        let mut b = vec![0.0; n * n];
        for line in 0..n {
            let y = line as f64 * h;
            let f = self.robin(comp, axis, t, y)?;
            b[line * n] -= (al - be) * 2.0 * h * f;
            if let Far::Known(e) = comp.far {
                let g = if axis == 0 {
                    Self::eval_at(e, t, n as f64 * h, y)?
                } else {
                    Self::eval_at(e, t, y, n as f64 * h)?
                };
                b[line * n + n - 1] += (al + be) * g;
            }
        }
        Ok(b)
    }

    /// Solves `(I − k L_a) Y = rhs + k b_a(t)` line by line; `rhs` and the
    /// result live on the unknowns of a full-size array.
    fn implicit(
        &self,
        comp: &Component<'_>,
        axis: usize,
        t: f64,
        k: f64,
        rhs: &[f64],
        out: &mut [f64],
    ) -> Result<(), FdError> {
        let n = self.n;
        let (lo, di, up) = self.line_coeffs(axis, comp.far);
        let b = self.boundary_terms(comp, axis, t)?;
        let lines: Vec<Result<Vec<f64>, FdError>> = (0..n)
            .into_par_iter()
            .map(|line| {
                let mut r: Vec<f64> = (0..n)
                    .map(|kk| {
                        let o = if axis == 0 {
                            self.idx(kk, line)
                        } else {
                            self.idx(line, kk)
                        };
                        rhs[o] + k * b[line * n + kk]
                    })
                    .collect();
                let a: Vec<f64> = lo.iter().map(|v| -k * v).collect();
                let d: Vec<f64> = di.iter().map(|v| 1.0 - k * v).collect();
                let c: Vec<f64> = up.iter().map(|v| -k * v).collect();
                thomas(&a, &d, &c, &mut r)?;
                Ok(r)
            })
            .collect();
        for (line, r) in lines.into_iter().enumerate() {
            let r = r?;
            for (kk, v) in r.into_iter().enumerate() {
                let o = if axis == 0 {
                    self.idx(kk, line)
                } else {
                    self.idx(line, kk)
                };
                out[o] = v;
            }
        }
        Ok(())
    }
}

/// In-place tridiagonal solve; `a[0]` and `c[n−1]` are ignored.
fn thomas(a: &[f64], d: &[f64], c: &[f64], r: &mut [f64]) -> Result<(), FdError> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut piv = d[0];
    if piv == 0.0 {
        return Err(FdError::LinearSolveFailure { row: 0 });
    }
    cp[0] = c[0] / piv;
    r[0] /= piv;
    for i in 1..n {
        piv = d[i] - a[i] * cp[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return Err(FdError::LinearSolveFailure { row: i });
        }
        cp[i] = c[i] / piv;
        r[i] = (r[i] - a[i] * r[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        r[i] -= cp[i] * r[i + 1];
    }
    Ok(())
}

/// One backward step `t_now → t_next = t_now − Δt` of the Craig–Sneyd
/// scheme. `extra(t, out)` adds an explicit source to `F0`.
fn cs_step<S>(
    st: &Stencil,
    comp: &Component<'_>,
    t_now: f64,
    dt: f64,
    u: &mut Vec<f64>,
    mut extra: S,
) -> Result<(), FdError>
where
    S: FnMut(f64, &[f64], &mut [f64]) -> Result<(), FdError>,
{
    let size = u.len();
    let t_next = t_now - dt;
    let k = 0.5 * dt;
    let mut f0 = vec![0.0; size];
    let mut f1 = vec![0.0; size];
    let mut f2 = vec![0.0; size];
    st.f0(comp, t_now, u, &mut f0)?;
    extra(t_now, u, &mut f0)?;
    st.fa(comp, 0, t_now, u, &mut f1)?;
    st.fa(comp, 1, t_now, u, &mut f2)?;
    let y0: Vec<f64> = (0..size)
        .map(|p| u[p] + dt * (f0[p] + f1[p] + f2[p]))
        .collect();
    let mut y1 = vec![0.0; size];
    let rhs: Vec<f64> = (0..size).map(|p| y0[p] - k * f1[p]).collect();
    st.implicit(comp, 0, t_next, k, &rhs, &mut y1)?;
    let mut y2 = vec![0.0; size];
    let rhs: Vec<f64> = (0..size).map(|p| y1[p] - k * f2[p]).collect();
    st.implicit(comp, 1, t_next, k, &rhs, &mut y2)?;
    st.apply_far(comp, t_next, &mut y2)?;
    let mut f0n = vec![0.0; size];
    st.f0(comp, t_next, &y2, &mut f0n)?;
    extra(t_next, &y2, &mut f0n)?;
    let z0: Vec<f64> = (0..size).map(|p| y0[p] + k * (f0n[p] - f0[p])).collect();
    let rhs: Vec<f64> = (0..size).map(|p| z0[p] - k * f1[p]).collect();
    st.implicit(comp, 0, t_next, k, &rhs, &mut y1)?;
    let rhs: Vec<f64> = (0..size).map(|p| y1[p] - k * f2[p]).collect();
    let mut next = vec![0.0; size];
    st.implicit(comp, 1, t_next, k, &rhs, &mut next)?;
    st.apply_far(comp, t_next, &mut next)?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(FdError::NaNDetected { t: t_next });
    }
    *u = next;
    Ok(())
}

fn check_inputs(params: &ModelParams, spec: &ProblemSpec, grid: &Grid2D) -> Result<(), FdError> {
    if params.d != 2 || spec.f.len() != 2 {
        return Err(FdError::Dimension(params.d));
    }
    grid.check(params.horizon)
}

fn time_levels(grid: &Grid2D, horizon: f64) -> (usize, f64) {
    let steps = ((horizon / grid.dt_fd) - 1e-9).ceil().max(1.0) as usize;
    (steps, horizon / steps as f64)
}

fn terminal(st: &Stencil, g: &Expr, horizon: f64) -> Result<Vec<f64>, FdError> {
    let n = st.n;
    let mut u = vec![0.0; (n + 1) * (n + 1)];
    for i1 in 0..=n {
        for i2 in 0..=n {
            u[st.idx(i1, i2)] = Stencil::eval_at(g, horizon, i1 as f64 * st.h, i2 as f64 * st.h)?;
        }
    }
    Ok(u)
}

struct Recorder {
    every: usize,
    steps: usize,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl Recorder {
    fn new(every: usize, steps: usize) -> Self {
        Self {
            every,
            steps,
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    fn record(&mut self, step: usize, t: f64, u: &[f64]) {
        if step % self.every == 0 || step == self.steps {
            self.times.push(t);
            self.values.push(u.to_vec());
        }
    }

    fn finish(mut self, grid: &Grid2D, scheme: &str) -> FDSolution {
        self.times.reverse();
        self.values.reverse();
        FDSolution {
            x_max: grid.x_max,
            n_x: grid.n_x,
            times: self.times,
            values: self.values,
            scheme: scheme.to_string(),
        }
    }
}

const SCHEME: &str = "Craig-Sneyd ADI, theta = 1/2, centered differences, Robin ghost nodes";

/// Solves the full problem (with the cross term) backwards from `T` to 0.
pub fn solve_robin_fd(
    params: &ModelParams,
    spec: &ProblemSpec,
    grid: &Grid2D,
    far_bc: &FarBc,
) -> Result<FDSolution, FdError> {
    check_inputs(params, spec, grid)?;
    let st = Stencil::new(params, grid);
    let far = match far_bc {
        FarBc::DirichletKnown(e) => Far::Known(e),
        FarBc::LinearExtrapolation => Far::Extrapolate,
    };
    let comp = Component {
        f: [Some(&spec.f[0]), Some(&spec.f[1])],
        far,
        cross: true,
    };
    let (steps, dt) = time_levels(grid, params.horizon);
    let mut u = terminal(&st, &spec.g, params.horizon)?;
    let mut rec = Recorder::new(grid.store_every, steps);
    rec.record(0, params.horizon, &u);
    for step in 1..=steps {
        let t_now = params.horizon - (step - 1) as f64 * dt;
        cs_step(&st, &comp, t_now, dt, &mut u, |_, _, _| Ok(()))?;
        rec.record(step, (params.horizon - step as f64 * dt).max(0.0), &u);
    }
    Ok(rec.finish(grid, SCHEME))
}

/// Solutions `φ` (no cross term, Robin data `f`, zero terminal data), `ψ`
/// (full operator, homogeneous Robin data, terminal data `g`, source
/// `A_12 ∂_12 φ` from the φ grid) and their sum. Both are advanced in the
/// same time loop, `φ` first, so the source is available at both ends of
/// every step. With known far values, `φ` is held at zero on the far edges
/// and `ψ` carries the known values.
pub fn solve_decomposed_fd(
    params: &ModelParams,
    spec: &ProblemSpec,
    grid: &Grid2D,
    far_bc: &FarBc,
) -> Result<(FDSolution, FDSolution, FDSolution), FdError> {
    check_inputs(params, spec, grid)?;
    let st = Stencil::new(params, grid);
    let (far_phi, far_psi) = match far_bc {
        FarBc::DirichletKnown(e) => (Far::Zero, Far::Known(e)),
        FarBc::LinearExtrapolation => (Far::Extrapolate, Far::Extrapolate),
    };
    let phi_comp = Component {
        f: [Some(&spec.f[0]), Some(&spec.f[1])],
        far: far_phi,
        cross: false,
    };
    let psi_comp = Component {
        f: [None, None],
        far: far_psi,
        cross: true,
    };
    let (steps, dt) = time_levels(grid, params.horizon);
    let size = (grid.n_x + 1) * (grid.n_x + 1);
    let mut phi = vec![0.0; size];
    let mut psi = terminal(&st, &spec.g, params.horizon)?;
    let mut rec_phi = Recorder::new(grid.store_every, steps);
    let mut rec_psi = Recorder::new(grid.store_every, steps);
    let mut rec_sum = Recorder::new(grid.store_every, steps);
    let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    rec_phi.record(0, params.horizon, &phi);
    rec_psi.record(0, params.horizon, &psi);
    rec_sum.record(0, params.horizon, &sum(&phi, &psi));
    for step in 1..=steps {
        let t_now = params.horizon - (step - 1) as f64 * dt;
        let t_next = t_now - dt;
        let phi_now = phi.clone();
        cs_step(&st, &phi_comp, t_now, dt, &mut phi, |_, _, _| Ok(()))?;
        let phi_next = &phi;
        cs_step(&st, &psi_comp, t_now, dt, &mut psi, |t, _, out| {
            let source = if (t - t_next).abs() < 0.5 * dt {
                phi_next
            } else {
                &phi_now
            };
            st.add_cross(&phi_comp, t, source, 1.0, out)
        })?;
        let t_rec = t_next.max(0.0);
        rec_phi.record(step, t_rec, &phi);
        rec_psi.record(step, t_rec, &psi);
        rec_sum.record(step, t_rec, &sum(&phi, &psi));
    }
    Ok((
        rec_phi.finish(grid, SCHEME),
        rec_psi.finish(grid, SCHEME),
        rec_sum.finish(grid, SCHEME),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeComparison {
    pub t: f64,
    pub x: Vec<f64>,
    pub fd: f64,
    pub mc: f64,
    pub std_error: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub probes: Vec<ProbeComparison>,
    pub all_pass: bool,
}

/// Compares Monte Carlo estimates with the grid solution; each probe passes
/// when the gap is at most `max(2% of |fd|, 3 SE)`.
pub fn compare(
    fd: &FDSolution,
    probes: &[QueryPoint],
    mc_values: &[EstimateResult],
) -> Result<ComparisonReport, FdError> {
    if probes.len() != mc_values.len() {
        return Err(FdError::LengthMismatch {
            probes: probes.len(),
            estimates: mc_values.len(),
        });
    }
    let mut rows = Vec::with_capacity(probes.len());
    for (q, est) in probes.iter().zip(mc_values) {
        let v = fd.value_at(q.t, &q.x)?;
        let abs_gap = (est.value - v).abs();
        let tolerance = (0.02 * v.abs()).max(3.0 * est.std_error);
        rows.push(ProbeComparison {
            t: q.t,
            x: q.x.clone(),
            fd: v,
            mc: est.value,
            std_error: est.std_error,
            abs_gap,
            rel_gap: if v != 0.0 { abs_gap / v.abs() } else { abs_gap },
            tolerance,
            pass: abs_gap <= tolerance,
        });
    }
    let all_pass = rows.iter().all(|r| r.pass);
    Ok(ComparisonReport {
        probes: rows,
        all_pass,
    })
}
