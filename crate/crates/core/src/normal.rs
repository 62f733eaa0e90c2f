//! Standard normal helpers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `Φ(z) / φ(z)`, stable for very negative `z` where both factors
/// underflow.
pub fn mills(z: f64) -> f64 {
    if z > -8.0 {
        return cdf(z) / pdf(z);
    }
    // Continued fraction for the upper tail ratio R(x) = Q(x)/φ(x), x = -z.
    let x = -z;
    let mut frac = 0.0;
    for k in (1..=60).rev() {
        frac = k as f64 / (x + frac);
    }
    1.0 / (x + frac)
}

/// `e^{a} Φ(z)` without intermediate overflow.
pub fn exp_times_cdf(a: f64, z: f64) -> f64 {
    if z > -8.0 {
        let c = cdf(z);
        if c == 0.0 {
            0.0
        } else {
            (a + c.ln()).exp()
        }
    } else {
        (a - 0.5 * z * z - 0.5 * (2.0 * PI).ln() + mills(z).ln()).exp()
    }
}
