use super::HarnessError;
use crate::expr::Expr;
use crate::model::{variable_names, ModelParams, ProblemSpec};

fn num(v: f64) -> String {
    if v < 0.0 {
        format!("({v})")
    } else {
        format!("{v}")
    }
}

/// `Σ_{j ∈ idx} a_j x_j + θ(T − t)` as source text; terms with a zero
/// coefficient are dropped.
fn exponent(a: &[f64], skip: Option<usize>, theta: Option<(f64, f64)>) -> String {
    let mut terms: Vec<String> = a
        .iter()
        .enumerate()
        .filter(|(j, aj)| Some(*j) != skip && **aj != 0.0)
        .map(|(j, aj)| format!("{} * x{}", num(*aj), j + 1))
        .collect();
    if let Some((theta, horizon)) = theta {
        if theta != 0.0 {
            terms.push(format!("{} * ({} - t)", num(theta), num(horizon)));
        }
    }
    terms.join(" + ")
}

fn exp_of(arg: String) -> String {
    if arg.is_empty() {
        "1".into()
    } else {
        format!("exp({arg})")
    }
}

/// Manufactured problem with solution `u = exp(a·x + θ(T − t))`,
/// `θ = ½ aᵀAa + μ·a − ρ`. Returns the problem data and `u`, after checking
/// symbolically (derivatives by the expression differentiator, evaluated on
/// a set of sample points) that `u` satisfies the equation and the Robin
/// lines.
pub fn make_manufactured_problem(
    params: &ModelParams,
    a: &[f64],
) -> Result<(ProblemSpec, Expr), HarnessError> {
    let d = params.d;
    if a.len() != d {
        return Err(HarnessError::validation(
            "problem.manufactured.a",
            format!("expected {d} entries, got {}", a.len()),
        ));
    }
    let am = params.diffusion_matrix();
    let quad: f64 = (0..d)
        .map(|i| (0..d).map(|j| a[i] * am[i][j] * a[j]).sum::<f64>())
        .sum();
    let drift: f64 = a.iter().zip(&params.mu).map(|(x, y)| x * y).sum();
    let theta = 0.5 * quad + drift - params.rho;
    let horizon = params.horizon;

    let u_src = exp_of(exponent(a, None, Some((theta, horizon))));
    let g_src = exp_of(exponent(a, None, None));
    let f_src: Vec<String> = (0..d)
        .map(|i| {
            let k = a[i] + params.c[i];
            if k == 0.0 {
                "0".to_string()
            } else {
                format!(
                    "{} * {}",
                    num(k),
                    exp_of(exponent(a, Some(i), Some((theta, horizon))))
                )
            }
        })
        .collect();
    let f_refs: Vec<&str> = f_src.iter().map(String::as_str).collect();
    let spec = ProblemSpec::parse(d, &f_refs, &g_src, "manufactured")
        .map_err(|e| HarnessError::validation("problem.manufactured", e.to_string()))?;
    let names = variable_names(d);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let u = Expr::parse(&u_src, &names)
        .map_err(|e| HarnessError::validation("problem.manufactured", e.to_string()))?;
    verify(params, &spec, &u)?;
    Ok((spec, u))
}

/// Evaluates the equation residual `∂_t u + L u − ρ u` and the Robin
/// residuals of the symbolic derivatives of `u` on sample points.
fn verify(params: &ModelParams, spec: &ProblemSpec, u: &Expr) -> Result<(), HarnessError> {
    let d = params.d;
    let am = params.diffusion_matrix();
    let du: Vec<Expr> = (0..=d).map(|k| u.derivative(k).simplified()).collect();
    let d2u: Vec<Vec<Expr>> = (1..=d)
        .map(|i| (1..=d).map(|j| du[i].derivative(j).simplified()).collect())
        .collect();
    let fail = |what: String| HarnessError::validation("problem.manufactured", what);
    let eval = |e: &Expr, v: &[f64]| e.eval_slice(v).map_err(|err| fail(err.to_string()));
    for k in 0..5 {
        let t = params.horizon * k as f64 / 4.0;
        for s in 0..4 {
            let mut v = vec![t];
            v.extend((0..d).map(|j| 0.3 * ((s + j) % 4) as f64));
            let uv = eval(u, &v)?;
            let mut r = eval(&du[0], &v)? - params.rho * uv;
            for i in 0..d {
                r += params.mu[i] * eval(&du[i + 1], &v)?;
                for j in 0..d {
                    r += 0.5 * am[i][j] * eval(&d2u[i][j], &v)?;
                }
            }
            if r.abs() > 1e-10 * uv.abs().max(1.0) {
                return Err(fail(format!("equation residual {r:e} at {v:?}")));
            }
            for i in 0..d {
                let mut w = v.clone();
                w[i + 1] = 0.0;
                let b = eval(&du[i + 1], &w)? + params.c[i] * eval(u, &w)? - eval(&spec.f[i], &w)?;
                if b.abs() > 1e-10 * eval(u, &w)?.abs().max(1.0) {
                    return Err(fail(format!(
                        "Robin residual {b:e} on face {} at {w:?}",
                        i + 1
                    )));
                }
            }
        }
    }
    let w: Vec<f64> = std::iter::once(params.horizon)
        .chain((0..d).map(|j| 0.2 * j as f64))
        .collect();
    let gap = eval(u, &w)? - eval(&spec.g, &w)?;
    if gap.abs() > 1e-12 * eval(u, &w)?.abs().max(1.0) {
        return Err(fail(format!("terminal mismatch {gap:e}")));
    }
    Ok(())
}
