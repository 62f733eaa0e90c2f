//! Problem definition: coefficients of the parabolic Robin problem on the
//! nonnegative orthant and the boundary/terminal data attached to it.
//!
//! The operator is
//!
//! ```text
//! L u = ½ Σ_ij A_ij ∂²_ij u + Σ_i μ_i ∂_i u,   A = σ σᵀ
//! ```
//!
//! with `(∂_t + L) u = ρ u` on `[0, T) × R₊^d`, `u(T, ·) = g` and
//! `∂_i u + c_i u = f_i(t, x^{-i})` on each face `x_i = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("diffusion matrix σσᵀ is not positive definite (pivot {pivot} at row {row})")]
    NonPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch in `{field}`: {detail}")]
    DimensionMismatch { field: &'static str, detail: String },
    #[error("bad scalar `{field}`: {detail}")]
    BadScalar { field: &'static str, detail: String },
    #[error("problem data `{field}`: {detail}")]
    BadProblem { field: String, detail: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Coefficients of the Robin problem. Construct freely, then call
/// [`ModelParams::validate`] before handing to any solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// State dimension.
    pub d: usize,
    /// Driver (Brownian) dimension.
    pub m: usize,
    pub mu: Vec<f64>,
    /// `d` rows of `m` loadings.
    pub sigma: Vec<Vec<f64>>,
    /// Killing rate.
    pub rho: f64,
    /// Robin coefficients.
    pub c: Vec<f64>,
    /// Horizon.
    #[serde(rename = "T", alias = "horizon")]
    pub horizon: f64,
}

impl ModelParams {
    /// Checks shapes, scalars and positive definiteness of `σσᵀ`. Returns the
    /// parameters unchanged on success, so `validate` is idempotent.
    pub fn validate(self) -> Result<Self, ModelError> {
        if self.d < 2 {
            return Err(ModelError::BadScalar {
                field: "d",
                detail: format!("state dimension must be at least 2, got {}", self.d),
            });
        }
        if self.m < 1 {
            return Err(ModelError::BadScalar {
                field: "m",
                detail: "driver dimension must be at least 1".into(),
            });
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::BadScalar {
                field: "T",
                detail: format!("horizon must be positive and finite, got {}", self.horizon),
            });
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(ModelError::BadScalar {
                field: "rho",
                detail: format!("killing rate must be nonnegative, got {}", self.rho),
            });
        }
        if self.mu.len() != self.d {
            return Err(ModelError::DimensionMismatch {
                field: "mu",
                detail: format!("expected {} entries, got {}", self.d, self.mu.len()),
            });
        }
        if self.c.len() != self.d {
            return Err(ModelError::DimensionMismatch {
                field: "c",
                detail: format!("expected {} entries, got {}", self.d, self.c.len()),
            });
        }
        if self.sigma.len() != self.d {
            return Err(ModelError::DimensionMismatch {
                field: "sigma",
                detail: format!("expected {} rows, got {}", self.d, self.sigma.len()),
            });
        }
        if let Some((i, row)) = self
            .sigma
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.m)
        {
            return Err(ModelError::DimensionMismatch {
                field: "sigma",
                detail: format!("row {} has {} entries, expected {}", i, row.len(), self.m),
            });
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.mu) || !finite(&self.c) || !self.sigma.iter().all(|r| finite(r)) {
            return Err(ModelError::BadScalar {
                field: "coefficients",
                detail: "non-finite entry in mu, c or sigma".into(),
            });
        }
        cholesky(&self.diffusion_matrix())?;
        Ok(self)
    }

    /// `A = σσᵀ`.
    pub fn diffusion_matrix(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.d]; self.d];
        for i in 0..self.d {
            for j in 0..self.d {
                a[i][j] = self.sigma[i]
                    .iter()
                    .zip(&self.sigma[j])
                    .map(|(p, q)| p * q)
                    .sum();
            }
        }
        a
    }

    /// `σ̃_i = sqrt(Σ_k σ_ik²)`, the volatility of the i-th component driver.
    pub fn effective_vol(&self, i: usize) -> f64 {
        self.sigma[i].iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    pub fn effective_vols(&self) -> Vec<f64> {
        (0..self.d).map(|i| self.effective_vol(i)).collect()
    }

    /// True when every off-diagonal entry of `σσᵀ` vanishes (up to 1e-14 of
    /// the largest diagonal entry), i.e. the cross-derivative source of the
    /// homogenized problem is identically zero.
    pub fn is_diagonal(&self) -> bool {
        let a = self.diffusion_matrix();
        let scale = (0..self.d).map(|i| a[i][i]).fold(0.0, f64::max);
        (0..self.d).all(|i| (0..self.d).all(|j| i == j || a[i][j].abs() <= 1e-14 * scale))
    }
}

/// Lower-triangular Cholesky factor of a symmetric matrix. A pivot below
/// `1e-12` times the largest diagonal entry counts as failure.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i]).fold(0.0, f64::max);
    let floor = 1e-12 * scale;
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let pivot = a[i][i] - s;
                if !(pivot > floor) || scale <= 0.0 {
                    return Err(ModelError::NonPositiveDefinite { row: i, pivot });
                }
                l[i][i] = pivot.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Boundary data `f_i(t, x^{-i})` and terminal data `g(x)`.
///
/// All expressions share the variable layout `[t, x1, ..., xd]`; `f_i` must
/// not mention `x_i` and `g` must not mention `t`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub f: Vec<Expr>,
    pub g: Expr,
    pub label: String,
}

/// Variable names `[t, x1, ..., xd]`.
pub fn variable_names(d: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=d).map(|i| format!("x{i}")))
        .collect()
}

impl ProblemSpec {
    /// Parses `f` and `g` over `[t, x1, ..., xd]` and checks the variable
    /// restrictions.
    pub fn parse(d: usize, f: &[&str], g: &str, label: &str) -> Result<Self, ModelError> {
        if f.len() != d {
            return Err(ModelError::DimensionMismatch {
                field: "f",
                detail: format!("expected {} boundary functions, got {}", d, f.len()),
            });
        }
        let names = variable_names(d);
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let f = f
            .iter()
            .enumerate()
            .map(|(i, src)| {
                Expr::parse(src, &names).map_err(|e| ModelError::BadProblem {
                    field: format!("f{}", i + 1),
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let g = Expr::parse(g, &names).map_err(|e| ModelError::BadProblem {
            field: "g".into(),
            detail: e.to_string(),
        })?;
        let spec = Self {
            f,
            g,
            label: label.to_string(),
        };
        spec.check(d)?;
        Ok(spec)
    }

    pub fn check(&self, d: usize) -> Result<(), ModelError> {
        if self.f.len() != d {
            return Err(ModelError::DimensionMismatch {
                field: "f",
                detail: format!("expected {} boundary functions, got {}", d, self.f.len()),
            });
        }
        for (i, fi) in self.f.iter().enumerate() {
            if fi.vars().len() != d + 1 {
                return Err(ModelError::DimensionMismatch {
                    field: "f",
                    detail: format!("f{} declared over {} variables", i + 1, fi.vars().len()),
                });
            }
            if fi.depends_on(i + 1) {
                return Err(ModelError::BadProblem {
                    field: format!("f{}", i + 1),
                    detail: format!("must not depend on x{}", i + 1),
                });
            }
        }
        if self.g.vars().len() != d + 1 {
            return Err(ModelError::DimensionMismatch {
                field: "g",
                detail: format!("declared over {} variables", self.g.vars().len()),
            });
        }
        if self.g.depends_on(0) {
            return Err(ModelError::BadProblem {
                field: "g".into(),
                detail: "terminal data must not depend on t".into(),
            });
        }
        Ok(())
    }

    /// True when every `f_i` is the literal constant zero.
    pub fn boundary_data_vanishes(&self) -> bool {
        self.f.iter().all(|fi| fi.is_zero())
    }
}
