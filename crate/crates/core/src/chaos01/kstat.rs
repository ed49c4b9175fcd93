//! K statistic of the 0-1 test, correlation method.

use super::{translation_vars, PqParams};
use crate::error::{Error, Result};

const MIN_LEN: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct KResult {
    pub c_values: Vec<f64>,
    pub k_values: Vec<f64>,
    pub k_median: f64,
}

/// Computes K for each c and their median.
///
/// For each c the modified mean-square displacement
/// `D(n) = M(n) - mean(s)^2 (1 - cos nc) / (1 - cos c)` is evaluated for
/// `n = 1..=N/10`, with `M(n)` averaged over the `N - n` available
/// increments; K is the Pearson correlation of `D(n)` with `n`. A flat
/// `D` (zero variance) yields K = 0.
pub fn compute_k(s: &[f64], c_values: &[f64]) -> Result<KResult> {
    if s.len() < MIN_LEN {
        return Err(Error::insufficient(
            "chaos01",
            format!("K statistic needs at least {MIN_LEN} samples, got {}", s.len()),
        ));
    }
    if c_values.is_empty() {
        return Err(Error::param("chaos01", "no c values given"));
    }
    let n = s.len();
    let n_cut = n / 10;
    let mean = s.iter().sum::<f64>() / n as f64;
    let lags: Vec<f64> = (1..=n_cut).map(|k| k as f64).collect();

    let mut k_values = Vec::with_capacity(c_values.len());
    for &c in c_values {
        let traj = translation_vars(s, PqParams::new(c))?;
        let (p, q) = (&traj.p, &traj.q);
        let denom = 1.0 - c.cos();
        let d: Vec<f64> = (1..=n_cut)
            .map(|lag| {
                let m = (0..n - lag)
                    .map(|j| {
                        let dp = p[j + lag] - p[j];
                        let dq = q[j + lag] - q[j];
                        dp * dp + dq * dq
                    })
                    .sum::<f64>()
                    / (n - lag) as f64;
                let osc = if denom.abs() > 1e-12 {
                    mean * mean * (1.0 - (lag as f64 * c).cos()) / denom
                } else {
                    0.0
                };
                m - osc
            })
            .collect();
        k_values.push(correlation(&lags, &d));
    }
    let k_median = median(&k_values);
    Ok(KResult {
        c_values: c_values.to_vec(),
        k_values,
        k_median,
    })
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= f64::EPSILON * f64::EPSILON * n {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_gives_zero() {
        let r = compute_k(&[0.0; 1000], &[1.0, 2.0]).unwrap();
        assert_eq!(r.k_values, vec![0.0, 0.0]);
        assert_eq!(r.k_median, 0.0);
    }

    #[test]
    fn errors() {
        assert!(compute_k(&[1.0; 999], &[1.0]).is_err());
        assert!(compute_k(&[1.0; 1000], &[]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn linear_growth_has_unit_correlation() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((correlation(&x, &y) - 1.0).abs() < 1e-12);
    }
}
