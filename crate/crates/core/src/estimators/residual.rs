use super::EstimatorError;
use crate::model::{ModelParams, ProblemSpec};

/// Residual of the Robin condition on the face `x_i = 0`,
/// `∂_i u + c_i u − f_i(t, x^{-i})`, with the normal derivative taken by the
/// second-order one-sided difference `(−3u(0) + 4u(ε) − u(2ε)) / 2ε`.
/// `x_minus_i` lists the other `d − 1` coordinates in order.
pub fn robin_residual<U>(
    params: &ModelParams,
    spec: &ProblemSpec,
    t: f64,
    i: usize,
    x_minus_i: &[f64],
    mut u: U,
    eps: f64,
) -> Result<f64, EstimatorError>
where
    U: FnMut(f64, &[f64]) -> Result<f64, EstimatorError>,
{
    if !(eps > 0.0) {
        return Err(EstimatorError::BadBudget(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if i >= params.d || x_minus_i.len() + 1 != params.d {
        return Err(EstimatorError::BadQuery(format!(
            "axis {} with {} remaining coordinates does not fit d = {}",
            i + 1,
            x_minus_i.len(),
            params.d
        )));
    }
    let mut x = Vec::with_capacity(params.d);
    x.extend_from_slice(&x_minus_i[..i]);
    x.push(0.0);
    x.extend_from_slice(&x_minus_i[i..]);
    let mut at = |h: f64| {
        x[i] = h;
        u(t, &x)
    };
    let u0 = at(0.0)?;
    let u1 = at(eps)?;
    let u2 = at(2.0 * eps)?;
    let du = (-3.0 * u0 + 4.0 * u1 - u2) / (2.0 * eps);
    let mut vals = vec![t];
    vals.extend_from_slice(&x);
    vals[i + 1] = 0.0;
    let f = spec.f[i].eval_slice(&vals)?;
    Ok(du + params.c[i] * u0 - f)
}
