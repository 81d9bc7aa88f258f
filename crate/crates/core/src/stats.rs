//! Correlation statistics with optional two-sided p-values.

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub n: usize,
    pub p_value: Option<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); zero for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Pearson correlation. Errors on fewer than three points or a constant
/// coordinate.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "{} x-values, {} y-values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::DegenerateData(format!(
            "{} points; need at least 3",
            x.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateData("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` from the t statistic with `n − 2` degrees of freedom.
pub fn t_test_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = r * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "{} x-values, {} y-values",
            x.len(),
            y.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Largest sample for which the Spearman p-value is computed by exact
/// enumeration of permutations.
pub const EXACT_PERMUTATION_MAX_N: usize = 8;

/// Two-sided Spearman p-value: exact over all permutations of the `y` ranks
/// for `n ≤ 8`, otherwise the t approximation.
pub fn spearman_p_value(x: &[f64], y: &[f64]) -> Result<f64> {
    let rho = spearman(x, y)?;
    let n = x.len();
    if n > EXACT_PERMUTATION_MAX_N {
        return Ok(t_test_p_value(rho, n));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mut extreme = 0usize;
    let mut total = 0usize;
    for perm in (0..n).permutations(n) {
        let permuted: Vec<f64> = perm.iter().map(|&i| ry[i]).collect();
        let r = pearson(&rx, &permuted)?;
        if r.abs() >= rho.abs() - 1e-12 {
            extreme += 1;
        }
        total += 1;
    }
    Ok(extreme as f64 / total as f64)
}
