//! Merge-instance sampling and the MergeFail verdict.

use std::collections::BTreeMap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// One merge: a task subset, the training seed chosen for each task, and the
/// per-task scores before and after merging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeInstance {
    pub index: usize,
    pub task_subset: Vec<String>,
    pub seed_assignment: BTreeMap<String, u64>,
    pub before_scores: BTreeMap<String, f64>,
    pub after_scores: BTreeMap<String, f64>,
    /// `after − before` per task.
    #[serde(default)]
    pub deltas: BTreeMap<String, f64>,
    pub failed: bool,
}

impl MergeInstance {
    fn skeleton(index: usize, tasks: Vec<String>, seeds: Vec<u64>) -> Self {
        let seed_assignment = tasks.iter().cloned().zip(seeds).collect();
        Self {
            index,
            task_subset: tasks,
            seed_assignment,
            before_scores: BTreeMap::new(),
            after_scores: BTreeMap::new(),
            deltas: BTreeMap::new(),
            failed: false,
        }
    }

    /// Record scores and set `failed`.
    pub fn score(
        &mut self,
        before: BTreeMap<String, f64>,
        after: BTreeMap<String, f64>,
        tau: f64,
    ) -> Result<()> {
        self.failed = merge_failed(&before, &after, tau)?;
        self.deltas = before
            .iter()
            .map(|(k, b)| (k.clone(), after[k] - b))
            .collect();
        self.before_scores = before;
        self.after_scores = after;
        Ok(())
    }

    /// Mean `|after − before|` over the subset's tasks.
    pub fn mean_abs_drop(&self) -> f64 {
        let n = self.before_scores.len().max(1) as f64;
        self.before_scores
            .iter()
            .map(|(k, b)| (self.after_scores.get(k).copied().unwrap_or(*b) - b).abs())
            .sum::<f64>()
            / n
    }
}

/// `true` iff some task has `after < τ · before` (strictly).
pub fn merge_failed(
    before: &BTreeMap<String, f64>,
    after: &BTreeMap<String, f64>,
    tau: f64,
) -> Result<bool> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau {tau} outside (0, 1]")));
    }
    let mut failed = false;
    for (task, b) in before {
        let a = after
            .get(task)
            .ok_or_else(|| Error::Config(format!("no post-merge score for task `{task}`")))?;
        failed |= *a < tau * b;
    }
    Ok(failed)
}

/// Fraction of failed instances.
pub fn merge_fail_rate(instances: &[MergeInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Empty("no merge instances".into()));
    }
    Ok(instances.iter().filter(|i| i.failed).count() as f64 / instances.len() as f64)
}

/// Number of distinct `(subset, seed assignment)` tuples, saturating.
pub fn combination_count(pool: usize, t: usize, seeds: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..t as u128 {
        c = c * (pool as u128 - i) / (i + 1);
    }
    c.saturating_mul((seeds as u128).saturating_pow(t as u32))
}

/// Draw `n_merge` merge skeletons, or enumerate every tuple when fewer than
/// `n_merge` exist. Instance `j` draws from its own stream
/// `Stream::child(sampling_seed, j)`.
///
/// `method_id` does not enter the draw: every method sees the same tuples.
pub fn sample_merge_instances(
    task_pool: &[String],
    train_seeds: &[u64],
    t: usize,
    n_merge: usize,
    sampling_seed: u64,
    method_id: &str,
) -> Result<Vec<MergeInstance>> {
    let _ = method_id;
    if t == 0 || t > task_pool.len() {
        return Err(Error::Config(format!(
            "merge size {t} must lie in 1..={}",
            task_pool.len()
        )));
    }
    if train_seeds.is_empty() {
        return Err(Error::Empty("no training seeds".into()));
    }
    if combination_count(task_pool.len(), t, train_seeds.len()) < n_merge as u128 {
        let mut out = Vec::new();
        for subset in (0..task_pool.len()).combinations(t) {
            for seeds in (0..t)
                .map(|_| train_seeds.iter().copied())
                .multi_cartesian_product()
            {
                let tasks = subset.iter().map(|&i| task_pool[i].clone()).collect();
                out.push(MergeInstance::skeleton(out.len(), tasks, seeds));
            }
        }
        return Ok(out);
    }
    Ok((0..n_merge)
        .map(|j| {
            let mut s = Stream::child(sampling_seed, j as u64);
            // Partial Fisher–Yates for a uniform subset without replacement.
            let mut idx: Vec<usize> = (0..task_pool.len()).collect();
            for i in 0..t {
                let pick = i + s.below(idx.len() - i);
                idx.swap(i, pick);
            }
            let mut subset = idx[..t].to_vec();
            subset.sort_unstable();
            let tasks = subset.iter().map(|&i| task_pool[i].clone()).collect();
            let seeds = (0..t)
                .map(|_| train_seeds[s.below(train_seeds.len())])
                .collect();
            MergeInstance::skeleton(j, tasks, seeds)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn strict_boundary() {
        let before = scores(&[("A", 50.0)]);
        assert!(!merge_failed(&before, &scores(&[("A", 45.0)]), 0.9).unwrap());
        assert!(!merge_failed(&before, &before, 0.9).unwrap());
        let before = scores(&[("A", 50.0), ("B", 60.0)]);
        assert!(merge_failed(&before, &scores(&[("A", 46.0), ("B", 53.0)]), 0.9).unwrap());
    }

    #[test]
    fn enumeration_when_few_combinations() {
        let pool = vec!["a".to_string(), "b".to_string()];
        let inst = sample_merge_instances(&pool, &[7], 2, 20, 1, "hip").unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].task_subset, pool);
    }

    #[test]
    fn sampling_is_deterministic_and_method_blind() {
        let pool: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
        let a = sample_merge_instances(&pool, &[42, 100, 2024], 4, 20, 9, "hip").unwrap();
        let b = sample_merge_instances(&pool, &[42, 100, 2024], 4, 20, 9, "lora").unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        assert!(sample_merge_instances(&pool, &[1], 5, 20, 9, "hip").is_err());
    }

    #[test]
    fn empty_rate_is_error() {
        assert!(merge_fail_rate(&[]).is_err());
    }
}
