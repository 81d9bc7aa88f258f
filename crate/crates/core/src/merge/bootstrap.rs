//! Hierarchical paired bootstrap over (seed, instance) data.
//!
//! A replicate draws `S` seeds with replacement and, inside each drawn seed,
//! that seed's `n_s` instances with replacement. The statistic is the mean over
//! all drawn instances. Every column (method) sees the same index plan, so
//! per-instance pairing is preserved.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Lower and upper bound of a percentile interval.
pub type Interval = (f64, f64);

/// Quantile with linear interpolation between order statistics
/// (`h = (n − 1) p`). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval at `level` from unsorted replicate statistics.
pub fn percentile_ci(mut stats: Vec<f64>, level: f64) -> Interval {
    stats.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(&stats, a), quantile_sorted(&stats, 1.0 - a))
}

fn check_columns(columns: &[&BTreeMap<u64, Vec<f64>>]) -> Result<Vec<usize>> {
    let first = columns
        .first()
        .ok_or_else(|| Error::Empty("no bootstrap columns".into()))?;
    if first.is_empty() {
        return Err(Error::Empty("no seeds".into()));
    }
    let sizes: Vec<usize> = first.values().map(Vec::len).collect();
    if sizes.contains(&0) {
        return Err(Error::Empty("a seed has no instances".into()));
    }
    for c in &columns[1..] {
        let same = c.len() == first.len()
            && c.iter()
                .zip(first.iter())
                .all(|((k1, v1), (k2, v2))| k1 == k2 && v1.len() == v2.len());
        if !same {
            return Err(Error::dim(
                "paired columns differ in seeds or instance counts",
            ));
        }
    }
    Ok(sizes)
}

/// Replicate statistics for each column under one shared resampling plan.
pub fn paired_bootstrap_stats(
    columns: &[&BTreeMap<u64, Vec<f64>>],
    replicates: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if replicates == 0 {
        return Err(Error::Config(
            "bootstrap needs at least one replicate".into(),
        ));
    }
    let sizes = check_columns(columns)?;
    let data: Vec<Vec<&Vec<f64>>> = columns.iter().map(|c| c.values().collect()).collect();
    let mut stream = Stream::new(rng_seed);
    let mut out = vec![Vec::with_capacity(replicates); columns.len()];
    let mut sums = vec![0.0; columns.len()];
    for _ in 0..replicates {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let mut count = 0usize;
        for _ in 0..sizes.len() {
            let s = stream.below(sizes.len());
            for _ in 0..sizes[s] {
                let i = stream.below(sizes[s]);
                for (c, col) in data.iter().enumerate() {
                    sums[c] += col[s][i];
                }
                count += 1;
            }
        }
        for (c, o) in out.iter_mut().enumerate() {
            o.push(sums[c] / count as f64);
        }
    }
    Ok(out)
}

/// Percentile CI of the pooled mean of one column.
pub fn paired_bootstrap_ci(
    per_seed: &BTreeMap<u64, Vec<f64>>,
    replicates: usize,
    level: f64,
    rng_seed: u64,
) -> Result<(f64, f64)> {
    let stats = paired_bootstrap_stats(&[per_seed], replicates, rng_seed)?;
    Ok(percentile_ci(stats.into_iter().next().unwrap(), level))
}

/// Percentile CIs for every column plus for `column[1] − column[0]`
/// (first entry of the returned pair), all from the same plan.
pub fn paired_difference_ci(
    baseline: &BTreeMap<u64, Vec<f64>>,
    treatment: &BTreeMap<u64, Vec<f64>>,
    replicates: usize,
    level: f64,
    rng_seed: u64,
) -> Result<(Interval, Vec<Interval>)> {
    let stats = paired_bootstrap_stats(&[baseline, treatment], replicates, rng_seed)?;
    let diff: Vec<f64> = stats[1].iter().zip(&stats[0]).map(|(t, b)| t - b).collect();
    let cis = stats.into_iter().map(|s| percentile_ci(s, level)).collect();
    Ok((percentile_ci(diff, level), cis))
}

/// Pooled mean over all instances of all seeds.
pub fn pooled_mean(per_seed: &BTreeMap<u64, Vec<f64>>) -> Result<f64> {
    let n: usize = per_seed.values().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Empty("no values".into()));
    }
    Ok(per_seed.values().flatten().sum::<f64>() / n as f64)
}
