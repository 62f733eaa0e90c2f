use orthant_core::fd_oracle::{
    compare, solve_decomposed_fd, solve_robin_fd, FDSolution, FarBc, FdError, Grid2D,
};
use orthant_core::{EstimateResult, Expr, ModelParams, ProblemSpec, QueryPoint};

fn params(sigma: [[f64; 2]; 2], mu: [f64; 2], rho: f64, c: [f64; 2]) -> ModelParams {
    ModelParams {
        d: 2,
        m: 2,
        mu: mu.to_vec(),
        sigma: sigma.iter().map(|r| r.to_vec()).collect(),
        rho,
        c: c.to_vec(),
        horizon: 1.0,
    }
    .validate()
    .unwrap()
}

fn vars() -> [&'static str; 3] {
    ["t", "x1", "x2"]
}

/// `u = exp(x1 + x2 + θ(1 − t))` for the given model, with its data.
fn manufactured(p: &ModelParams) -> (ProblemSpec, Expr) {
    let a = p.diffusion_matrix();
    let theta = 0.5 * (a[0][0] + 2.0 * a[0][1] + a[1][1]) + p.mu[0] + p.mu[1] - p.rho;
    let f1 = format!("{} * exp(x2 + {theta} * (1 - t))", 1.0 + p.c[0]);
    let f2 = format!("{} * exp(x1 + {theta} * (1 - t))", 1.0 + p.c[1]);
    let spec = ProblemSpec::parse(2, &[&f1, &f2], "exp(x1 + x2)", "manufactured").unwrap();
    let u = Expr::parse(&format!("exp(x1 + x2 + {theta} * (1 - t))"), &vars()).unwrap();
    (spec, u)
}

fn correlated() -> ModelParams {
    // σσᵀ = [[1, 0.5], [0.5, 1]]
    params(
        [[1.0, 0.0], [0.5, 0.75f64.sqrt()]],
        [0.0, 0.0],
        0.0,
        [-0.5, -0.5],
    )
}

fn max_rel_error(sol: &FDSolution, u: &Expr, trusted: f64) -> f64 {
    let h = sol.dx();
    let mut worst: f64 = 0.0;
    for (level, t) in sol.times.iter().enumerate() {
        for i1 in 0..sol.n_x {
            for i2 in 0..sol.n_x {
                let (x1, x2) = (i1 as f64 * h, i2 as f64 * h);
                if x1 > trusted || x2 > trusted {
                    continue;
                }
                let exact = u.eval_slice(&[*t, x1, x2]).unwrap();
                worst = worst.max((sol.node(level, i1, i2) - exact).abs() / exact.abs());
            }
        }
    }
    worst
}

#[test]
fn constant_solution_is_reproduced() {
    let p = params([[1.0, 0.0], [0.5, 0.8]], [0.2, -0.1], 0.0, [0.0, 0.0]);
    let spec = ProblemSpec::parse(2, &["0", "0"], "1", "const").unwrap();
    let grid = Grid2D::new(6.0, 32, 0.02);
    let sol = solve_robin_fd(&p, &spec, &grid, &FarBc::LinearExtrapolation).unwrap();
    for slice in &sol.values {
        for v in slice {
            assert!((v - 1.0).abs() < 1e-10, "{v}");
        }
    }
}

#[test]
fn terminal_slice_is_g() {
    let p = correlated();
    let (spec, u) = manufactured(&p);
    let grid = Grid2D::new(4.0, 32, 0.02);
    let sol = solve_robin_fd(&p, &spec, &grid, &FarBc::DirichletKnown(u)).unwrap();
    let last = sol.times.len() - 1;
    assert_eq!(sol.times[last], 1.0);
    let h = sol.dx();
    for i1 in 0..=32 {
        for i2 in 0..=32 {
            let g = (i1 as f64 * h + i2 as f64 * h).exp();
            assert!((sol.node(last, i1, i2) - g).abs() <= 1e-12 * g);
        }
    }
}

#[test]
fn manufactured_error_and_order() {
    let p = correlated();
    let (spec, u) = manufactured(&p);
    let x_max = 4.0;
    let err = |n: usize| {
        let grid = Grid2D::new(x_max, n, 1e-3);
        let sol = solve_robin_fd(&p, &spec, &grid, &FarBc::DirichletKnown(u.clone())).unwrap();
        max_rel_error(&sol, &u, x_max)
    };
    let (e64, e128) = (err(64), err(128));
    println!("errors: {e64:.3e} {e128:.3e} ratio {:.3}", e64 / e128);
    assert!(e128 <= 1e-3, "{e128}");
    let ratio = e64 / e128;
    assert!((3.0..=5.0).contains(&ratio), "{ratio}");
    let order = ratio.log2();
    assert!((1.7..=2.3).contains(&order), "{order}");
}

#[test]
fn maximum_principle() {
    let zero = FarBc::DirichletKnown(Expr::constant(0.0, &vars()));
    let cases = [
        (
            params([[1.2, 0.0], [-0.6, 0.9]], [0.3, -0.4], 0.5, [-0.4, 0.0]),
            zero.clone(),
        ),
        (
            params([[1.0, 0.0], [0.7, 0.5]], [0.5, 0.5], 0.0, [-1.0, -0.2]),
            zero,
        ),
        (
            params([[1.2, 0.0], [-0.6, 0.9]], [-0.3, -0.4], 0.5, [-0.4, 0.0]),
            FarBc::LinearExtrapolation,
        ),
        (
            params([[0.8, 0.0], [0.4, 0.6]], [0.0, -0.1], 0.1, [0.0, -0.3]),
            FarBc::LinearExtrapolation,
        ),
    ];
    for (k, (p, far)) in cases.into_iter().enumerate() {
        for g in [
            "(1 - cos(3 * x1)) * exp(-x2)",
            "exp(-x1 - x2)",
            "x1 * x2 * exp(-x1)",
        ] {
            let spec = ProblemSpec::parse(2, &["0", "0"], g, "nonneg").unwrap();
            let sol = solve_robin_fd(&p, &spec, &Grid2D::new(6.0, 48, 0.01), &far).unwrap();
            // Extrapolation is not monotone; it is trusted only away from the far edges.
            let last = if matches!(far, FarBc::LinearExtrapolation) {
                38
            } else {
                48
            };
            let mut min = f64::INFINITY;
            for level in 0..sol.times.len() {
                for i1 in 0..=last {
                    for i2 in 0..=last {
                        min = min.min(sol.node(level, i1, i2));
                    }
                }
            }
            assert!(min >= -1e-10, "case {k}, {g}: {min}");
        }
    }
}

#[test]
fn decomposition_is_exact_for_diagonal_diffusion() {
    let p = params([[1.0, 0.0], [0.0, 0.7]], [0.1, -0.2], 0.2, [-0.5, 0.3]);
    let spec =
        ProblemSpec::parse(2, &["sin(x2) + t", "1 / (1 + x1)"], "exp(-x1 - x2)", "diag").unwrap();
    let grid = Grid2D::new(6.0, 40, 0.01);
    for far in [
        FarBc::LinearExtrapolation,
        FarBc::DirichletKnown(Expr::constant(0.0, &vars())),
    ] {
        let full = solve_robin_fd(&p, &spec, &grid, &far).unwrap();
        let (_, _, sum) = solve_decomposed_fd(&p, &spec, &grid, &far).unwrap();
        let gap = full
            .values
            .iter()
            .flatten()
            .zip(sum.values.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(gap <= 1e-8, "{gap}");
    }
}

#[test]
fn decomposition_gap_within_discretization_error() {
    let p = correlated();
    let (spec, u) = manufactured(&p);
    let x_max = 8.5;
    let grid = Grid2D::new(x_max, 64, 1e-2);
    let far = FarBc::DirichletKnown(u.clone());
    let full = solve_robin_fd(&p, &spec, &grid, &far).unwrap();
    let (_, _, sum) = solve_decomposed_fd(&p, &spec, &grid, &far).unwrap();
    let h = full.dx();
    let (mut gap, mut disc): (f64, f64) = (0.0, 0.0);
    for (level, t) in full.times.iter().enumerate() {
        for i1 in 0..=64 {
            for i2 in 0..=64 {
                let exact = u.eval_slice(&[*t, i1 as f64 * h, i2 as f64 * h]).unwrap();
                let a = full.node(level, i1, i2);
                gap = gap.max((a - sum.node(level, i1, i2)).abs() / exact);
                disc = disc.max((a - exact).abs() / exact);
            }
        }
    }
    println!("gap {gap:.3e} discretization {disc:.3e}");
    assert!(gap <= 2.0 * disc, "gap {gap} vs {disc}");
}

#[test]
fn decomposition_of_pure_killing() {
    let p = params([[1.0, 0.0], [0.6, 0.8]], [0.0, 0.0], 0.3, [0.0, 0.0]);
    let spec = ProblemSpec::parse(2, &["0", "0"], "1", "killing").unwrap();
    let grid = Grid2D::new(6.0, 24, 0.02);
    let (phi, psi, _) = solve_decomposed_fd(&p, &spec, &grid, &FarBc::LinearExtrapolation).unwrap();
    for (level, t) in psi.times.iter().enumerate() {
        let want = (-0.3 * (1.0 - t)).exp();
        for (a, b) in phi.values[level].iter().zip(&psi.values[level]) {
            assert!(a.abs() < 1e-12);
            assert!((b - want).abs() < 1e-4, "{b} vs {want}");
        }
    }
}

#[test]
fn compare_reports_gaps_and_guards_domain() {
    let p = correlated();
    let (spec, u) = manufactured(&p);
    let grid = Grid2D::new(4.0, 32, 0.02);
    let sol = solve_robin_fd(&p, &spec, &grid, &FarBc::DirichletKnown(u)).unwrap();
    let probes = vec![
        QueryPoint::new(0.5, &[0.5, 0.5]),
        QueryPoint::new(0.2, &[1.0, 0.25]),
    ];
    let same: Vec<EstimateResult> = probes
        .iter()
        .map(|q| EstimateResult {
            value: sol.value_at(q.t, &q.x).unwrap(),
            std_error: 0.0,
            n_paths: 1,
            dt: 0.0,
            seed: 0,
            wall_time: 0.0,
        })
        .collect();
    let report = compare(&sol, &probes, &same).unwrap();
    assert!(report.all_pass);
    assert!(report.probes.iter().all(|r| r.abs_gap == 0.0));
    let far = vec![QueryPoint::new(0.5, &[0.95 * 4.0, 1.0])];
    let err = compare(&sol, &far, &same[..1]).unwrap_err();
    assert!(matches!(err, FdError::ProbeOutOfDomain { .. }));
}

#[test]
fn slice_dump_has_all_nodes() {
    let p = params([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], 0.0, [0.0, 0.0]);
    let spec = ProblemSpec::parse(2, &["0", "0"], "1", "const").unwrap();
    let sol = solve_robin_fd(
        &p,
        &spec,
        &Grid2D::new(2.0, 16, 0.02),
        &FarBc::LinearExtrapolation,
    )
    .unwrap();
    let mut buf = Vec::new();
    sol.write_slice_csv(0, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 17 * 17);
    assert!(text.starts_with("x1,x2,value\n0,0,"));
}
