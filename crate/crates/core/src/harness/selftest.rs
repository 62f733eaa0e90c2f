//! Quick invariant suite run by `mode = "selftest"`. Budgets are fixed and
//! small; only the master seed comes from the configuration.

use std::f64::consts::PI;
use std::time::Instant;

use super::{make_manufactured_problem, CheckVerdict, ExperimentConfig, HarnessError, RunReport};
use crate::densities::{h_function, joint_density, running_max_density, ComponentLaw};
use crate::estimators::{
    estimate_u_naive, estimate_varphi_factorized, estimate_varphi_gradient,
    estimate_varphi_stieltjes, EstimateResult, McBudget, QueryPoint,
};
use crate::fd_oracle::{solve_robin_fd, FarBc, Grid2D};
use crate::model::{ModelParams, ProblemSpec};
use crate::normal;
use crate::paths::{reflect_into, DriverKind, DriverSampler, ReflectedPath, TimeGrid};
use crate::quad::{integrate, QuadOptions};
use crate::rng::{substream, Purpose};

fn model(sigma: [[f64; 2]; 2], mu: [f64; 2], rho: f64, c: [f64; 2]) -> ModelParams {
    ModelParams {
        d: 2,
        m: 2,
        mu: mu.to_vec(),
        sigma: sigma.iter().map(|r| r.to_vec()).collect(),
        rho,
        c: c.to_vec(),
        horizon: 1.0,
    }
}

fn within(name: &str, est: &EstimateResult, reference: f64, k: f64) -> CheckVerdict {
    let gap = (est.value - reference).abs();
    CheckVerdict::new(
        name,
        est.within_se(reference, k),
        format!(
            "estimate {:.6} ± {:.2e}, reference {reference:.6}, gap {gap:.2e}",
            est.value, est.std_error
        ),
    )
}

type Check = Result<CheckVerdict, HarnessError>;

fn skorokhod_invariants(seed: u64) -> Check {
    let p = model([[1.0, 0.0], [0.6, 0.8]], [0.3, -0.5], 0.0, [0.0, 0.0])
        .validate()
        .map_err(map_model)?;
    let grid = TimeGrid::uniform(0.0, 1.0, 1e-2)?;
    let sampler = DriverSampler::new(&p, DriverKind::Correlated, false);
    let mut path = ReflectedPath::zeros(2, grid.n_steps());
    let mut worst = String::new();
    for k in 0..200 {
        let mut rng = substream(seed, Purpose::Test, k);
        let driver = sampler.sample(&grid, &mut rng);
        reflect_into(&[0.2, 0.0], &driver, false, &mut path)?;
        if let Err(e) = path.check_invariants(1e-12) {
            worst = format!("path {k}: {e}");
            break;
        }
    }
    Ok(CheckVerdict::new(
        "reflected paths stay in the orthant with monotone flat-off local time",
        worst.is_empty(),
        if worst.is_empty() {
            "200 paths".into()
        } else {
            worst
        },
    ))
}

fn map_model(e: crate::model::ModelError) -> HarnessError {
    HarnessError::validation("selftest", e.to_string())
}

fn unit_model() -> Result<ModelParams, HarnessError> {
    model([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], 0.0, [0.0, 0.0])
        .validate()
        .map_err(map_model)
}

fn spec(f: [&str; 2], g: &str) -> Result<ProblemSpec, HarnessError> {
    ProblemSpec::parse(2, &f, g, "selftest").map_err(map_model)
}

fn local_time_mean(seed: u64) -> Check {
    let p = unit_model()?;
    let s = spec(["-1", "0"], "0")?;
    let est = estimate_u_naive(
        &p,
        &s,
        &QueryPoint::new(0.0, &[0.0, 5.0]),
        &McBudget::new(20_000, 1e-2),
        seed,
    )?;
    Ok(within(
        "mean boundary local time is sqrt(2/pi)",
        &est,
        (2.0 / PI).sqrt(),
        3.0,
    ))
}

fn hitting_probability(seed: u64) -> Check {
    let p = unit_model()?;
    let s = spec(["1", "0"], "0")?;
    let est = estimate_varphi_gradient(
        &p,
        &s,
        &QueryPoint::new(0.0, &[1.0, 1.0]),
        0,
        &McBudget::new(20_000, 1e-2),
        seed,
    )?;
    Ok(within(
        "gradient reproduces the hitting probability",
        &est,
        2.0 * (1.0 - normal::cdf(1.0)),
        3.0,
    ))
}

fn factorization(seed: u64) -> Check {
    let p = unit_model()?;
    let s = spec(["1", "0"], "0")?;
    let q = QueryPoint::new(0.0, &[0.0, 5.0]);
    let a = estimate_varphi_stieltjes(&p, &s, &q, &McBudget::new(20_000, 1e-2), seed)?;
    let b = estimate_varphi_factorized(&p, &s, &q, 20_000, 32, seed)?;
    let se = a.std_error.hypot(b.std_error);
    let gap = (a.value - b.value).abs();
    let ok = gap <= 3.0 * se;
    Ok(CheckVerdict::new(
        "factorized and Stieltjes forms agree",
        ok,
        format!(
            "stieltjes {:.5}, factorized {:.5}, gap {gap:.2e}, combined SE {se:.2e}",
            a.value, b.value
        ),
    ))
}

fn trivial_killing(seed: u64) -> Check {
    let mut p = unit_model()?;
    p.rho = 0.3;
    let s = spec(["0", "0"], "1")?;
    let est = estimate_u_naive(
        &p,
        &s,
        &QueryPoint::new(0.25, &[0.5, 0.5]),
        &McBudget::new(5_000, 1e-2),
        seed,
    )?;
    Ok(within(
        "pure killing gives exp(-rho (T - t))",
        &est,
        (-0.3f64 * 0.75).exp(),
        3.0,
    ))
}

fn densities() -> Check {
    let law = ComponentLaw::new(0.4, 1.3, 0.0, 0.8)?;
    let opts = QuadOptions::tol(1e-12, 1e-10);
    let hi = 12.0;
    let max_mass = integrate(|y| running_max_density(&law, y), 0.0, hi, &opts)?.value;
    let joint_mass = integrate(
        |y| {
            integrate(|r| joint_density(&law, r, y), -hi, y, &opts)
                .map(|v| v.value)
                .unwrap_or(f64::NAN)
        },
        0.0,
        hi,
        &opts,
    )?
    .value;
    let flat = ComponentLaw::new(0.0, 1.0, 0.0, 0.5)?;
    let h = h_function(&flat, 0.0, 0.0)?;
    let h_exact = 1.0 / (2.0 * PI * 0.5).sqrt();
    let ok = (max_mass - 1.0).abs() <= 1e-6
        && (joint_mass - 1.0).abs() <= 1e-6
        && (h / h_exact - 1.0).abs() <= 1e-3;
    Ok(CheckVerdict::new(
        "densities normalize and h matches its closed form",
        ok,
        format!("max mass {max_mass:.9}, joint mass {joint_mass:.9}, h {h:.6} vs {h_exact:.6}"),
    ))
}

fn manufactured() -> Check {
    let p = model(
        [[1.0, 0.0], [0.5, 0.75f64.sqrt()]],
        [0.0, 0.0],
        0.0,
        [-0.5, -0.5],
    )
    .validate()
    .map_err(map_model)?;
    let (_, u) = make_manufactured_problem(&p, &[1.0, 1.0])?;
    let v = u
        .eval_slice(&[0.5, 0.5, 0.5])
        .map_err(crate::estimators::EstimatorError::from)?;
    let want = 1.75f64.exp();
    Ok(CheckVerdict::new(
        "manufactured solution satisfies the problem",
        (v - want).abs() <= 1e-12 * want,
        format!("u(0.5, (0.5, 0.5)) = {v:.8}"),
    ))
}

fn fd_checks() -> Result<Vec<CheckVerdict>, HarnessError> {
    let p = model(
        [[1.0, 0.0], [0.5, 0.75f64.sqrt()]],
        [0.0, 0.0],
        0.0,
        [-0.5, -0.5],
    )
    .validate()
    .map_err(map_model)?;
    let ones = spec(["0", "0"], "1")?;
    let neumann = model(
        [[1.0, 0.0], [0.5, 0.75f64.sqrt()]],
        [0.2, -0.1],
        0.0,
        [0.0, 0.0],
    )
    .validate()
    .map_err(map_model)?;
    let sol = solve_robin_fd(
        &neumann,
        &ones,
        &Grid2D::new(4.0, 16, 0.02),
        &FarBc::LinearExtrapolation,
    )?;
    let dev = sol
        .values
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    let constant = CheckVerdict::new(
        "grid solver keeps constants",
        dev <= 1e-10,
        format!("max deviation {dev:.2e}"),
    );

    let (s, u) = make_manufactured_problem(&p, &[1.0, 1.0])?;
    let mut errs = Vec::new();
    for n in [32, 64] {
        let sol = solve_robin_fd(
            &p,
            &s,
            &Grid2D::new(4.0, n, 5e-3),
            &FarBc::DirichletKnown(u.clone()),
        )?;
        let h = sol.dx();
        let mut worst: f64 = 0.0;
        for (level, t) in sol.times.iter().enumerate() {
            for i1 in 0..=n {
                for i2 in 0..=n {
                    let exact = u
                        .eval_slice(&[*t, i1 as f64 * h, i2 as f64 * h])
                        .map_err(crate::estimators::EstimatorError::from)?;
                    worst = worst.max((sol.node(level, i1, i2) - exact).abs() / exact);
                }
            }
        }
        errs.push(worst);
    }
    let order = (errs[0] / errs[1]).log2();
    let conv = CheckVerdict::new(
        "grid solver converges at second order",
        (1.7..=2.3).contains(&order),
        format!("errors {:.3e}, {:.3e}; order {order:.3}", errs[0], errs[1]),
    );
    Ok(vec![constant, conv])
}

fn determinism(seed: u64) -> Check {
    let p = model([[1.0, 0.0], [0.5, 0.8]], [0.1, 0.0], 0.2, [-0.3, 0.2])
        .validate()
        .map_err(map_model)?;
    let s = spec(["sin(x2)", "t"], "exp(-x1) + x2")?;
    let q = QueryPoint::new(0.0, &[0.3, 0.1]);
    let b = McBudget::new(2_000, 2e-2);
    let a = estimate_u_naive(&p, &s, &q, &b, seed)?;
    let c = estimate_u_naive(&p, &s, &q, &b, seed)?;
    Ok(CheckVerdict::new(
        "seeded runs are reproducible",
        a.value.to_bits() == c.value.to_bits() && a.std_error.to_bits() == c.std_error.to_bits(),
        format!("{} and {}", a.value, c.value),
    ))
}

pub fn selftest(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let seed = config.seed;
    let mut report = RunReport::new(config);
    let started = Instant::now();
    report.checks.push(skorokhod_invariants(seed)?);
    report.checks.push(local_time_mean(seed)?);
    report.checks.push(hitting_probability(seed)?);
    report.checks.push(factorization(seed)?);
    report.checks.push(trivial_killing(seed)?);
    report.checks.push(densities()?);
    report.checks.push(manufactured()?);
    report.checks.extend(fd_checks()?);
    report.checks.push(determinism(seed)?);
    report.time("selftest", started);
    Ok(report.finish())
}
