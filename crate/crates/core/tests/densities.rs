use std::f64::consts::PI;

use orthant_core::densities::{
    exceedance_rate, exceedance_rate_first_passage, h_first_passage, h_function, joint_density,
    local_time_exp_moment, local_time_mgf, running_max_cdf, running_max_density, ComponentLaw,
};
use orthant_core::normal;
use orthant_core::paths::bridge_max_from_uniform;
use orthant_core::quad::{integrate, QuadOptions};
use orthant_core::rng::{substream, Purpose};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn law(mu: f64, vol: f64, u: f64) -> ComponentLaw {
    ComponentLaw::new(mu, vol, 0.0, u).unwrap()
}

fn tight() -> QuadOptions {
    QuadOptions {
        max_evals: 200_000,
        ..QuadOptions::tol(1e-13, 1e-12)
    }
}

/// Span of the maximum worth integrating over.
fn reach(l: &ComponentLaw) -> f64 {
    14.0 * l.vol * l.span().sqrt() + l.nu().abs() * l.span()
}

/// `(W̃_s, M_s)` drawn exactly: Gaussian endpoint, then the bridge maximum.
fn draw<R: Rng>(l: &ComponentLaw, rng: &mut R) -> (f64, f64) {
    let u = l.span();
    let z: f64 = rng.sample(StandardNormal);
    let r = l.nu() * u + l.vol * u.sqrt() * z;
    let m = bridge_max_from_uniform(0.0, r, u, l.vol, 1.0 - rng.random::<f64>());
    (r, m)
}

#[test]
fn reference_values() {
    let l = law(0.0, 1.0, 1.0);
    let want = 4.0 / (2.0 * PI).sqrt() * (-2.0f64).exp();
    assert!((joint_density(&l, 0.0, 1.0) - want).abs() < 1e-12);
    assert!((want - 0.215964).abs() < 1e-6);
    assert_eq!(joint_density(&l, 0.5, 0.3), 0.0);
    assert_eq!(joint_density(&l, -0.5, -0.1), 0.0);
    assert!((running_max_density(&l, 0.0) - (2.0 / PI).sqrt()).abs() < 1e-12);
    let tail = integrate(
        |y| running_max_density(&l, y),
        1.0,
        1.0 + reach(&l),
        &tight(),
    )
    .unwrap()
    .value;
    assert!(
        (tail - 2.0 * (1.0 - normal::cdf(1.0))).abs() < 1e-6,
        "{tail}"
    );
}

#[test]
fn exponential_moments_at_the_boundary() {
    let l = law(0.0, 1.0, 1.0);
    let mgf = local_time_mgf(&l, 1.0, 0.0).unwrap();
    let want = 2.0 * 0.5f64.exp() * normal::cdf(1.0);
    assert!((mgf - want).abs() < 1e-8, "{mgf} vs {want}");
    for x in [0.0, 0.7, 3.0] {
        assert_eq!(local_time_mgf(&l, 0.0, x).unwrap(), 1.0);
    }
    let mean = local_time_exp_moment(&l, 0.0, 0.0).unwrap();
    assert!((mean - (2.0 / PI).sqrt()).abs() < 1e-8);
}

#[test]
fn densities_normalize() {
    for (mu, vol, u) in [
        (0.0, 1.0, 1.0),
        (0.8, 0.6, 0.5),
        (-1.2, 1.7, 2.0),
        (2.5, 0.3, 0.1),
    ] {
        let l = law(mu, vol, u);
        let hi = reach(&l);
        let max_mass = integrate(|y| running_max_density(&l, y), 0.0, hi, &tight())
            .unwrap()
            .value;
        let joint_mass = integrate(
            |y| {
                integrate(|r| joint_density(&l, r, y), y - 2.0 * hi, y, &tight())
                    .unwrap()
                    .value
            },
            0.0,
            hi,
            &QuadOptions::tol(1e-10, 1e-9),
        )
        .unwrap()
        .value;
        assert!(
            (max_mass - 1.0).abs() <= 1e-6,
            "max mass {max_mass} for {l:?}"
        );
        assert!(
            (joint_mass - 1.0).abs() <= 1e-6,
            "joint mass {joint_mass} for {l:?}"
        );
    }
}

#[test]
fn joint_density_marginalizes_to_max_density() {
    let mut rng = substream(21, Purpose::Test, 0);
    for _ in 0..50 {
        let l = law(
            rng.random_range(-2.0..2.0),
            rng.random_range(0.3..2.0),
            rng.random_range(0.05..2.0),
        );
        let y = rng.random_range(0.0..2.0) * l.vol * l.span().sqrt();
        let marginal = integrate(
            |r| joint_density(&l, r, y),
            y - 2.0 * reach(&l),
            y,
            &tight(),
        )
        .unwrap()
        .value;
        let direct = running_max_density(&l, y);
        assert!(
            (marginal - direct).abs() <= 1e-8,
            "{marginal} vs {direct} at y={y}, {l:?}"
        );
    }
}

#[test]
fn simulated_maxima_match_the_cdf() {
    let l = law(0.4, 1.3, 0.8);
    let mut rng = substream(22, Purpose::Test, 0);
    let n = 100_000;
    let mut m: Vec<f64> = (0..n).map(|_| draw(&l, &mut rng).1).collect();
    m.sort_by(f64::total_cmp);
    let ks = m
        .iter()
        .enumerate()
        .map(|(k, y)| {
            let f = running_max_cdf(&l, *y);
            (f - k as f64 / n as f64)
                .abs()
                .max(((k + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.95 / (n as f64).sqrt() * 1.5, "KS {ks}");
}

#[test]
fn joint_density_matches_simulated_boxes() {
    let l = law(-0.3, 1.0, 1.0);
    let mut rng = substream(23, Purpose::Test, 0);
    let n = 200_000;
    let draws: Vec<(f64, f64)> = (0..n).map(|_| draw(&l, &mut rng)).collect();
    let boxes = [
        (-1.0, 0.0, 0.0, 0.5),
        (0.0, 0.5, 0.5, 1.0),
        (-0.5, 0.5, 1.0, 1.5),
        (0.5, 1.5, 1.0, 2.0),
    ];
    for (r0, r1, y0, y1) in boxes {
        let p = integrate(
            |y| {
                integrate(|r| joint_density(&l, r, y), r0, r1, &tight())
                    .unwrap()
                    .value
            },
            y0,
            y1,
            &QuadOptions::tol(1e-12, 1e-10),
        )
        .unwrap()
        .value;
        let hits = draws
            .iter()
            .filter(|(r, y)| (r0..r1).contains(r) && (y0..y1).contains(y))
            .count();
        let freq = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * se,
            "box {r0}..{r1} x {y0}..{y1}: {freq} vs {p}"
        );
    }
}

#[test]
fn h_matches_closed_form_and_limits() {
    for u in [0.25, 1.0, 2.0] {
        let h = h_function(&law(0.0, 1.0, u), 0.0, 0.0).unwrap();
        let want = 1.0 / (2.0 * PI * u).sqrt();
        assert!((h / want - 1.0).abs() <= 1e-3, "{h} vs {want}");
    }
    assert!((h_function(&law(0.0, 1.0, 1.0), 0.0, 0.0).unwrap() - 0.39894).abs() <= 1e-4);
    assert!(h_function(&law(0.0, 1.0, 1.0), 0.0, 40.0).unwrap().abs() < 1e-12);
    assert!(h_function(&law(0.3, 0.8, 1.0), 0.4, 40.0).unwrap().abs() < 1e-12);
}

#[test]
fn h_integrates_to_the_moment() {
    // c ∫_t^T h ds = E[e^{c L_T}] − 1, with h vanishing like 1/√(s − t).
    for (mu, vol, c, x) in [
        (0.0, 1.0, 0.5, 0.0),
        (0.3, 0.8, -0.7, 0.2),
        (-0.5, 1.2, 0.4, 0.5),
    ] {
        let l = law(mu, vol, 1.0);
        let opts = QuadOptions::tol(1e-9, 1e-8);
        let area = integrate(
            |v: f64| 2.0 * v * h_function(&l.at(v * v), c, x).unwrap(),
            1e-3,
            1.0,
            &opts,
        )
        .unwrap()
        .value;
        let head = local_time_mgf(&l.at(1e-6), c, x).unwrap() - 1.0;
        let lhs = c * area + head;
        let rhs = local_time_mgf(&l, c, x).unwrap() - 1.0;
        assert!((lhs - rhs).abs() <= 1e-4, "c={c}: {lhs} vs {rhs}");
    }
}

#[test]
fn derivative_and_first_passage_forms_agree() {
    for (mu, vol, u, c, x) in [
        (0.0, 1.0, 1.0, 0.0, 0.0),
        (0.4, 0.7, 0.5, -0.6, 0.3),
        (-0.8, 1.5, 2.0, 0.3, 1.0),
    ] {
        let l = law(mu, vol, u);
        let a = h_function(&l, c, x).unwrap();
        let b = h_first_passage(&l, c, x).unwrap();
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "h: {a} vs {b}");
        let a = exceedance_rate(&l, c, x).unwrap();
        let b = exceedance_rate_first_passage(&l, c, x).unwrap();
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "rate: {a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn densities_are_nonnegative(
        mu in -3.0f64..3.0,
        vol in 0.1f64..3.0,
        u in 0.01f64..3.0,
        r in -5.0f64..5.0,
        y in 0.0f64..5.0,
    ) {
        let l = law(mu, vol, u);
        prop_assert!(joint_density(&l, r, y) >= 0.0);
        prop_assert!(running_max_density(&l, y) >= 0.0);
        let f = running_max_cdf(&l, y);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn moment_is_nonincreasing_in_start(
        mu in -1.5f64..1.5,
        vol in 0.3f64..2.0,
        u in 0.05f64..2.0,
        c in -1.0f64..1.0,
        x in 0.0f64..2.0,
        dx in 0.01f64..1.0,
    ) {
        let l = law(mu, vol, u);
        let near = local_time_exp_moment(&l, c, x).unwrap();
        let far = local_time_exp_moment(&l, c, x + dx).unwrap();
        if c >= 0.0 {
            prop_assert!(far <= near + 1e-10, "{} > {}", far, near);
        } else {
            // e^{cL} is decreasing in L, so the ordering flips.
            prop_assert!(far >= near - 1e-10, "{} < {}", far, near);
        }
    }
}
