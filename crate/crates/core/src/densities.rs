//! Laws of one driver component `W̃_s` (drift `ν = −μ_i`, volatility `σ̃_i`)
//! and of its running maximum `M_s`, plus the local-time moments
//! built from them. With `u = s − t`:
//!
//! ```text
//! P(M_s > y) = Φ((νu − y)/σ√u) + e^{2νy/σ²} Φ((−y − νu)/σ√u),   y ≥ 0
//! ```
//!
//! Local time started at `x` is `L_s = (M_s − x)⁺`, so every moment of `L`
//! is a one-dimensional integral against this tail.

use thiserror::Error;

use crate::normal::{cdf, exp_times_cdf, pdf};
use crate::quad::{integrate_pieces, QuadError, QuadOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("invalid component law: {0}")]
    BadLaw(String),
    #[error("exponential local-time moment diverges (c = {c}, value {value})")]
    Divergent { c: f64, value: f64 },
    #[error("time span {span} too small for a derivative in s")]
    NearSingular { span: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

/// Law of `W̃_s = −μ (s − t) − σ̃ B_{s−t}` and its running maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentLaw {
    pub mu: f64,
    pub vol: f64,
    pub t: f64,
    pub s: f64,
}

/// Truncation width in standard deviations for the improper integrals.
const WIDTH: f64 = 12.0;

impl ComponentLaw {
    pub fn new(mu: f64, vol: f64, t: f64, s: f64) -> Result<Self, DensityError> {
        if !(vol > 0.0) || !vol.is_finite() {
            return Err(DensityError::BadLaw(format!(
                "vol must be positive, got {vol}"
            )));
        }
        if !(s > t) || !mu.is_finite() {
            return Err(DensityError::BadLaw(format!(
                "need s > t, got t={t}, s={s}"
            )));
        }
        Ok(Self { mu, vol, t, s })
    }

    pub fn nu(&self) -> f64 {
        -self.mu
    }

    pub fn span(&self) -> f64 {
        self.s - self.t
    }

    /// Same component observed at another time `s`.
    pub fn at(&self, s: f64) -> Self {
        Self { s, ..*self }
    }

    fn scale(&self) -> f64 {
        self.vol * self.span().sqrt()
    }
}

/// Joint density of `(W̃_s, M_s)` at endpoint `r` and maximum `y`.
pub fn joint_density(law: &ComponentLaw, r: f64, y: f64) -> f64 {
    if y < 0.0 || y < r {
        return 0.0;
    }
    let (nu, s2, u) = (law.nu(), law.vol * law.vol, law.span());
    let w = 2.0 * y - r;
    let expo = nu * r / s2 - nu * nu * u / (2.0 * s2) - w * w / (2.0 * s2 * u);
    2.0 * w / (s2 * (2.0 * std::f64::consts::PI * s2 * u * u * u).sqrt()) * expo.exp()
}

/// `P(M_s ≤ y)`.
pub fn running_max_cdf(law: &ComponentLaw, y: f64) -> f64 {
    if y < 0.0 {
        return 0.0;
    }
    1.0 - running_max_tail(law, y)
}

/// `P(M_s > y)` for `y ≥ 0`, accurate far into the tail.
pub fn running_max_tail(law: &ComponentLaw, y: f64) -> f64 {
    if y < 0.0 {
        return 1.0;
    }
    let (nu, u, sc) = (law.nu(), law.span(), law.scale());
    let s2 = law.vol * law.vol;
    cdf((nu * u - y) / sc) + exp_times_cdf(2.0 * nu * y / s2, (-y - nu * u) / sc)
}

/// Density of `M_s` at `y ≥ 0`.
pub fn running_max_density(law: &ComponentLaw, y: f64) -> f64 {
    if y < 0.0 {
        return 0.0;
    }
    let (nu, u, sc) = (law.nu(), law.span(), law.scale());
    let s2 = law.vol * law.vol;
    let a = (y - nu * u) / sc;
    let b = (-y - nu * u) / sc;
    2.0 * pdf(a) / sc - 2.0 * nu / s2 * exp_times_cdf(2.0 * nu * y / s2, b)
}

/// Density of `W̃_s` at `r` on the event `{M_s < x}` (`r < x`).
pub fn killed_density(law: &ComponentLaw, x: f64, r: f64) -> f64 {
    if r >= x || x <= 0.0 {
        return 0.0;
    }
    let (nu, u, sc) = (law.nu(), law.span(), law.scale());
    let s2 = law.vol * law.vol;
    let direct = pdf((r - nu * u) / sc);
    let z = (r - 2.0 * x - nu * u) / sc;
    let image = (2.0 * nu * x / s2 - 0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    ((direct - image) / sc).max(0.0)
}

/// Density of the first time `W̃` reaches `level > 0`, evaluated at `s`.
pub fn first_passage_density(law: &ComponentLaw, level: f64) -> f64 {
    let (nu, u) = (law.nu(), law.span());
    let sc = law.scale();
    level / (sc * u) * pdf((level - nu * u) / sc)
}

fn moment_options() -> QuadOptions {
    QuadOptions {
        initial_panels: 2,
        ..QuadOptions::tol(1e-15, 1e-12)
    }
}

/// Upper truncation point for integrals of `e^{c y}` against the law of `M`.
fn upper_limit(law: &ComponentLaw, c: f64, x: f64) -> f64 {
    let (nu, u, sc) = (law.nu(), law.span(), law.scale());
    x.max(nu * u + c.max(0.0) * law.vol * law.vol * u) + WIDTH * sc
}

/// Breakpoints between `x` and the truncation point, spaced on the scale
/// of the law so the adaptive rule starts near the mass.
fn breaks(law: &ComponentLaw, c: f64, x: f64) -> Vec<f64> {
    let hi = upper_limit(law, c, x);
    let sc = law.scale();
    let mut b = vec![x];
    for k in [0.25, 1.0, 3.0, 6.0] {
        let p = x + k * sc;
        if p < hi {
            b.push(p);
        }
    }
    b.push(hi);
    b
}

/// `∫_x^∞ e^{c(y−x)} P(M_s > y) dy`.
fn weighted_tail_integral(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    let bp = breaks(law, c, x);
    let r = match integrate_pieces(
        |y| (c * (y - x)).exp() * running_max_tail(law, y),
        &bp,
        &moment_options(),
    ) {
        Err(QuadError::NonFinite { .. }) if c > 0.0 => {
            return Err(DensityError::Divergent {
                c,
                value: f64::INFINITY,
            })
        }
        other => other?,
    };
    // The tail decays at least like a Gaussian of width `sc` beyond `hi`.
    let hi = bp[bp.len() - 1];
    let tail = (c * (hi - x)).exp() * running_max_tail(law, hi) * law.scale();
    let value = r.value;
    if !value.is_finite() || !tail.is_finite() || (tail > 1e-10 * value.abs() && tail > 1e-300) {
        return Err(DensityError::Divergent { c, value });
    }
    Ok(value)
}

/// `E[e^{c L_s}]` with `L_s = (M_s − x)⁺`; equals 1 at `c = 0`.
pub fn local_time_mgf(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    if c == 0.0 {
        return Ok(1.0);
    }
    let v = 1.0 + c * weighted_tail_integral(law, c, x.max(0.0))?;
    if !v.is_finite() {
        return Err(DensityError::Divergent { c, value: v });
    }
    Ok(v)
}

/// The moment whose s-derivative drives the Stieltjes measure of a
/// component: `E[e^{c L_s}]` for `c ≠ 0` and `E[L_s]` for `c = 0`.
pub fn local_time_exp_moment(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    if c == 0.0 {
        weighted_tail_integral(law, 0.0, x.max(0.0))
    } else {
        local_time_mgf(law, c, x)
    }
}

/// `E[e^{c(M_s − x)} 1{M_s > x}]`, the x-derivative of the moment up to
/// sign and a factor `c`.
pub fn exceedance_moment(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    let x = x.max(0.0);
    let base = running_max_tail(law, x);
    if c == 0.0 {
        return Ok(base);
    }
    Ok(base + c * weighted_tail_integral(law, c, x)?)
}

/// Derivative in `s` by central differences with Richardson extrapolation.
/// The coarsest step is 16 times the floor `max(1e-5, 1e-4 (s−t))`, capped
/// at a quarter of the span; halving stops once two extrapolated values
/// agree to 1e-6 relative or the floor is reached.
pub fn d_ds<F>(law: &ComponentLaw, mut g: F) -> Result<f64, DensityError>
where
    F: FnMut(&ComponentLaw) -> Result<f64, DensityError>,
{
    let u = law.span();
    if u < 1e-8 {
        return Err(DensityError::NearSingular { span: u });
    }
    let floor = (1e-5f64).max(1e-4 * u).min(0.25 * u);
    let mut step = (16.0 * floor).min(0.25 * u);
    let mut central = |h: f64| -> Result<f64, DensityError> {
        Ok((g(&law.at(law.s + h))? - g(&law.at(law.s - h))?) / (2.0 * h))
    };
    let mut row = vec![central(step)?];
    let mut best = row[0];
    loop {
        step *= 0.5;
        let mut next = vec![central(step)?];
        let mut factor = 4.0;
        for k in 0..row.len() {
            let v = next[k] + (next[k] - row[k]) / (factor - 1.0);
            next.push(v);
            factor *= 4.0;
        }
        let estimate = next[next.len() - 1];
        let change = (estimate - best).abs();
        best = estimate;
        if change <= 1e-6 * estimate.abs() || step <= floor * (1.0 + 1e-12) {
            return Ok(best);
        }
        row = next;
    }
}

/// `h(s) = (1/c) ∂_s E[e^{c L_s}]` for `c ≠ 0`, `∂_s E[L_s]` for `c = 0`:
/// the density in `s` of `E[∫ e^{c L} dL]`.
pub fn h_function(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    let d = d_ds(law, |l| local_time_exp_moment(l, c, x))?;
    Ok(if c == 0.0 { d } else { d / c })
}

/// `∂_s E[e^{c(M_s − x)} 1{M_s > x}] = −∂_x h`.
pub fn exceedance_rate(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    d_ds(law, |l| exceedance_moment(l, c, x))
}

/// `h` through first-passage densities,
/// `h(s) = ∫_x^∞ e^{c(y−x)} ∂_s P(τ_y ≤ s) dy`, which needs no difference
/// quotient and so also works for spans below the [`h_function`] limit.
pub fn h_first_passage(law: &ComponentLaw, c: f64, x: f64) -> Result<f64, DensityError> {
    let x = x.max(0.0);
    let r = integrate_pieces(
        |y| (c * (y - x)).exp() * first_passage_density(law, y),
        &breaks(law, c, x),
        &moment_options(),
    )?;
    Ok(r.value)
}

/// First-passage form of [`exceedance_rate`]:
/// `∂_s K = ∂_s P(τ_x ≤ s) + c h(s)`.
pub fn exceedance_rate_first_passage(
    law: &ComponentLaw,
    c: f64,
    x: f64,
) -> Result<f64, DensityError> {
    let x = x.max(0.0);
    let atom = if x > 0.0 {
        first_passage_density(law, x)
    } else {
        0.0
    };
    if c == 0.0 {
        return Ok(atom);
    }
    Ok(atom + c * h_first_passage(law, c, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_law(u: f64) -> ComponentLaw {
        ComponentLaw::new(0.0, 1.0, 0.0, u).unwrap()
    }

    #[test]
    fn joint_density_reference_point() {
        let v = joint_density(&std_law(1.0), 0.0, 1.0);
        let expected = 4.0 / (2.0 * std::f64::consts::PI).sqrt() * (-2.0f64).exp();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.215_964).abs() < 1e-6);
        assert_eq!(joint_density(&std_law(1.0), 0.5, 0.3), 0.0);
        assert_eq!(joint_density(&std_law(1.0), -0.5, -0.1), 0.0);
    }

    #[test]
    fn max_density_at_zero_is_half_normal() {
        let v = running_max_density(&std_law(1.0), 0.0);
        assert!((v - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
        let tail = running_max_tail(&std_law(1.0), 1.0);
        assert!((tail - 2.0 * (1.0 - cdf(1.0))).abs() < 1e-15);
    }

    #[test]
    fn moments_at_reference_law() {
        let law = std_law(1.0);
        assert_eq!(local_time_mgf(&law, 0.0, 0.3).unwrap(), 1.0);
        let m = local_time_exp_moment(&law, 1.0, 0.0).unwrap();
        assert!((m - 2.0 * 0.5f64.exp() * cdf(1.0)).abs() < 1e-10, "{m}");
        let m0 = local_time_exp_moment(&law, 0.0, 0.0).unwrap();
        assert!((m0 - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn h_at_reference_law() {
        let law = std_law(1.0);
        let h = h_function(&law, 0.0, 0.0).unwrap();
        assert!(
            (h - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-6,
            "{h}"
        );
        for (c, x) in [(0.0, 0.3), (0.7, 0.0), (-0.4, 0.5)] {
            let a = h_function(&law, c, x).unwrap();
            let b = h_first_passage(&law, c, x).unwrap();
            assert!((a - b).abs() < 1e-6 * b.abs(), "c={c} x={x}: {a} vs {b}");
        }
        for (c, x) in [(0.0, 0.3), (0.7, 0.0), (-0.4, 0.5)] {
            let a = exceedance_rate(&law, c, x).unwrap();
            let b = exceedance_rate_first_passage(&law, c, x).unwrap();
            assert!(
                (a - b).abs() < 1e-6 * b.abs().max(1e-3),
                "c={c} x={x}: {a} vs {b}"
            );
        }
        let far = h_function(&law, 0.5, 30.0).unwrap();
        assert!(far.abs() < 1e-12);
        assert!(matches!(
            h_function(&ComponentLaw::new(0.0, 1.0, 0.0, 1e-9).unwrap(), 0.0, 0.0),
            Err(DensityError::NearSingular { .. })
        ));
    }
}
