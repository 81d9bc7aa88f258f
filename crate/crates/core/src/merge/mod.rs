//! Training-free composition of adapters that share one frozen backbone.
//!
//! Addition merges sum the per-adapter updates. On the principal channel this
//! is a sum of deviations: the merged gains are `σ + Σ φ⁽ⁱ⁾`, never a sum of
//! the raw gains `θ⁽ⁱ⁾ = σ + φ⁽ⁱ⁾`.

mod bootstrap;
mod sampling;
mod ties;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bootstrap::{
    paired_bootstrap_ci, paired_bootstrap_stats, paired_difference_ci, percentile_ci, pooled_mean,
    quantile_sorted,
};
pub use sampling::{
    combination_count, merge_fail_rate, merge_failed, sample_merge_instances, MergeInstance,
};
pub use ties::{keep_count, ties_merge, trim};

use crate::adapter::{delta_w, residual_delta, Adapter};
use crate::cache::{fingerprint, LayerCaches};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeRule {
    #[serde(rename = "add")]
    Addition,
    #[serde(rename = "ties")]
    Ties,
}

impl fmt::Display for MergeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeRule::Addition => "add",
            MergeRule::Ties => "ties",
        })
    }
}

impl FromStr for MergeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(MergeRule::Addition),
            "ties" => Ok(MergeRule::Ties),
            other => Err(Error::Config(format!("unknown merge rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub rule: MergeRule,
    pub tau: f64,
    pub n_merge: usize,
    pub seeds: Vec<u64>,
    pub ties_keep_frac: f64,
    pub ties_lambda: f64,
    pub bootstrap_replicates: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            rule: MergeRule::Addition,
            tau: 0.9,
            n_merge: 20,
            seeds: vec![42, 100, 2024],
            ties_keep_frac: 0.2,
            ties_lambda: 1.0,
            bootstrap_replicates: 10_000,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if !(self.ties_keep_frac > 0.0 && self.ties_keep_frac <= 1.0) {
            return Err(Error::Config(format!(
                "ties_keep_frac {} outside (0, 1]",
                self.ties_keep_frac
            )));
        }
        if self.n_merge == 0 || self.seeds.is_empty() {
            return Err(Error::Config("n_merge and seeds must be nonempty".into()));
        }
        Ok(())
    }
}

fn check_shared_cache(adapters: &[&Adapter], caches: &LayerCaches) -> Result<()> {
    let fp = fingerprint(caches);
    for (i, a) in adapters.iter().enumerate() {
        if a.cache_fingerprint != fp {
            return Err(Error::IncompatibleBackbone(format!(
                "adapter {i} was trained on cache {} but the merge uses {fp}",
                a.cache_fingerprint
            )));
        }
        a.check_against(caches)?;
    }
    Ok(())
}

/// Merged effective weights for every cached layer:
/// `W̃ + U diag(σ + Σφ⁽ⁱ⁾) Vᵀ + Σ ΔW_res⁽ⁱ⁾`. With no adapters this is the
/// pristine backbone.
pub fn merge_addition(
    adapters: &[&Adapter],
    caches: &LayerCaches,
) -> Result<BTreeMap<String, Matrix>> {
    check_shared_cache(adapters, caches)?;
    let mut out = BTreeMap::new();
    for (id, cache) in caches {
        let mut gains = cache.sigma.clone();
        let mut residual = Matrix::zeros(cache.rows(), cache.cols());
        for a in adapters {
            if let Some(st) = a.layers.get(id) {
                if a.config.trains_phi() {
                    gains.iter_mut().zip(&st.phi).for_each(|(g, p)| *g += p);
                }
                residual.add_assign(&residual_delta(st, cache, &a.config)?)?;
            }
        }
        let mut w = cache.w_tilde.add(&cache.principal_with_gains(&gains)?)?;
        w.add_assign(&residual)?;
        out.insert(id.clone(), w);
    }
    Ok(out)
}

/// Dense route to the same merge: `W + Σ ΔW⁽ⁱ⁾`, with `W` taken from `base`.
pub fn merge_addition_dense(
    base: &BTreeMap<String, Matrix>,
    adapters: &[&Adapter],
    caches: &LayerCaches,
) -> Result<BTreeMap<String, Matrix>> {
    check_shared_cache(adapters, caches)?;
    let mut out = BTreeMap::new();
    for (id, cache) in caches {
        let mut w = base
            .get(id)
            .ok_or_else(|| Error::IncompatibleBackbone(format!("base lacks layer `{id}`")))?
            .clone();
        for a in adapters {
            if let Some(st) = a.layers.get(id) {
                w.add_assign(&delta_w(st, cache, &a.config)?)?;
            }
        }
        out.insert(id.clone(), w);
    }
    Ok(out)
}

/// TIES merge of the adapters' realized dense updates, added to the cached
/// backbone `W̃ + U diag(σ) Vᵀ`.
pub fn merge_ties(
    adapters: &[&Adapter],
    caches: &LayerCaches,
    config: &MergeConfig,
) -> Result<BTreeMap<String, Matrix>> {
    if adapters.is_empty() {
        return Err(Error::Empty("TIES merge needs at least one adapter".into()));
    }
    check_shared_cache(adapters, caches)?;
    let mut out = BTreeMap::new();
    for (id, cache) in caches {
        let tvs = adapters
            .iter()
            .filter_map(|a| a.layers.get(id).map(|st| delta_w(st, cache, &a.config)))
            .collect::<Result<Vec<_>>>()?;
        let mut w = cache.reconstruct();
        if !tvs.is_empty() {
            w.add_assign(&ties_merge(
                &tvs,
                config.ties_keep_frac,
                config.ties_lambda,
            )?)?;
        }
        out.insert(id.clone(), w);
    }
    Ok(out)
}

/// Merge with the configured rule.
pub fn merge(
    adapters: &[&Adapter],
    caches: &LayerCaches,
    config: &MergeConfig,
) -> Result<BTreeMap<String, Matrix>> {
    match config.rule {
        MergeRule::Addition => merge_addition(adapters, caches),
        MergeRule::Ties => merge_ties(adapters, caches, config),
    }
}
