//! Sample summaries and the deterministic parallel map used by every
//! Monte Carlo estimator.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std_dev: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Neumaier-compensated sum in index order.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Two-pass mean and standard error, summed in index order.
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std_dev: f64::NAN,
            std_error: f64::NAN,
            n,
        };
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    if n == 1 {
        return Summary {
            mean,
            std_dev: 0.0,
            std_error: 0.0,
            n,
        };
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    let std_dev = (ss / (n - 1) as f64).sqrt();
    Summary {
        mean,
        std_dev,
        std_error: std_dev / (n as f64).sqrt(),
        n,
    }
}

/// Sample covariance of two equally long samples.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    assert_eq!(n, b.len());
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1) as f64
}

/// Evaluates `f(i)` for `i in 0..n` on the current rayon pool and returns
/// the results in index order. Combined with per-index random substreams
/// this makes any reduction over the output independent of thread count.
pub fn par_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().with_min_len(64).map(f).collect()
}

/// Like [`par_collect`] but hands each worker a reusable scratch value.
pub fn par_collect_with<T, S, I, F>(n: usize, init: I, f: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> T + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .with_min_len(64)
        .map_init(init, f)
        .collect()
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_constant_sample_has_zero_error() {
        let s = summarize(&[2.5; 10]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.std_error, 0.0);
    }

    #[test]
    fn summary_matches_hand_computation() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std_dev - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn par_collect_preserves_order() {
        let v = par_collect(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, x)| *x == 2 * i));
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 0.5 * v).collect();
        assert!((slope(&x, &y) + 0.5).abs() < 1e-15);
    }
}
