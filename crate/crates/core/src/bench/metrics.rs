//! Retention, continual-learning and edit-success metrics. Scores are
//! accuracies in percent; drops are in percentage points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean of `Δ_b = base_b − adapted_b` over the suite, leaving out
/// `exclude_task`. Lower is better; negative means the adaptation helped.
pub fn retain_metric(
    base: &BTreeMap<String, f64>,
    adapted: &BTreeMap<String, f64>,
    exclude_task: Option<&str>,
) -> Result<f64> {
    if base.len() != adapted.len() || base.keys().any(|k| !adapted.contains_key(k)) {
        return Err(Error::Config(
            "base and adapted scores cover different benchmarks".into(),
        ));
    }
    if let Some(ex) = exclude_task {
        if !base.contains_key(ex) {
            return Err(Error::Config(format!(
                "excluded task `{ex}` is not in the suite"
            )));
        }
    }
    let drops: Vec<f64> = base
        .iter()
        .filter(|(k, _)| Some(k.as_str()) != exclude_task)
        .map(|(k, b)| b - adapted[k])
        .collect();
    if drops.is_empty() {
        return Err(Error::Empty(
            "retention suite is empty after exclusion".into(),
        ));
    }
    Ok(drops.iter().sum::<f64>() / drops.len() as f64)
}

/// `(AvgAcc, Forgetting)` of a lower-triangular accuracy matrix, where
/// `acc[t][i]` is the accuracy on task `i` after stage `t` (`i ≤ t`).
/// Forgetting is `None` when there is a single stage.
pub fn avgacc_and_forgetting(acc: &[Vec<f64>]) -> Result<(f64, Option<f64>)> {
    let t = acc.len();
    if t == 0 {
        return Err(Error::Empty("accuracy matrix has no stages".into()));
    }
    for (s, row) in acc.iter().enumerate() {
        if row.len() < s + 1 {
            return Err(Error::dim(format!(
                "stage {s} row has {} entries, needs {}",
                row.len(),
                s + 1
            )));
        }
    }
    let last = &acc[t - 1];
    let avg = last[..t].iter().sum::<f64>() / t as f64;
    if t == 1 {
        return Ok((avg, None));
    }
    let forgetting = (0..t - 1)
        .map(|i| {
            let best = (i..t).map(|s| acc[s][i]).fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .sum::<f64>()
        / (t - 1) as f64;
    Ok((avg, Some(forgetting)))
}

/// Forgetting alone; undefined for a single stage.
pub fn forgetting(acc: &[Vec<f64>]) -> Result<f64> {
    avgacc_and_forgetting(acc)?
        .1
        .ok_or_else(|| Error::UndefinedMetric("forgetting needs at least two stages".into()))
}

/// An edit succeeds on a normalized string match or when the new target is
/// strictly more likely than the old one.
pub fn edit_success(logp_new: f64, logp_old: f64, string_match: bool) -> bool {
    string_match || logp_new > logp_old
}

/// Per-benchmark scores of one adapted model against the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub in_domain: String,
    pub base: BTreeMap<String, f64>,
    pub adapted: BTreeMap<String, f64>,
    pub drops: BTreeMap<String, f64>,
    pub retain: f64,
}

impl ScoreCard {
    pub fn new(
        in_domain: &str,
        base: BTreeMap<String, f64>,
        adapted: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if let Some((k, v)) = base
            .iter()
            .chain(&adapted)
            .find(|(_, v)| !(0.0..=100.0).contains(*v))
        {
            return Err(Error::Config(format!(
                "score {v} for `{k}` outside [0, 100]"
            )));
        }
        let retain = retain_metric(&base, &adapted, Some(in_domain))?;
        let drops = base
            .iter()
            .map(|(k, b)| (k.clone(), b - adapted[k]))
            .collect();
        Ok(Self {
            in_domain: in_domain.to_string(),
            base,
            adapted,
            drops,
            retain,
        })
    }

    pub fn in_domain_gain(&self) -> f64 {
        self.adapted[&self.in_domain] - self.base[&self.in_domain]
    }
}
