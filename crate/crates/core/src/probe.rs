//! Rank-1 spectral interventions on frozen weights and the σ–drop statistics.
//!
//! Component `i` of a weight is read off the weight itself,
//! `C_i = (u_iᵀ W v_i) u_i v_iᵀ`, using the cached singular vectors. On the
//! cached weight `u_iᵀ W v_i = σ_i`; on an already-intervened weight it is the
//! current coefficient, which makes Zero idempotent and Flip an involution.

use std::collections::BTreeMap;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{LayerCaches, SvdCacheEntry};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::merge::percentile_ci;
use crate::model::{accuracy, Backbone, Batch};
use crate::rng::{derive_seed, label_seed, Stream};
use crate::stats::{
    mean, pearson, sample_std, spearman, spearman_p_value, t_test_p_value, Correlation,
};

pub const DEFAULT_NOISE_DELTA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    Zero,
    Flip,
    Noise,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 3] = [Self::Zero, Self::Flip, Self::Noise];
}

impl std::fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Flip => "flip",
            Self::Noise => "noise",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer_id: String,
    /// 1-based.
    pub direction_index: usize,
    pub kind: InterventionKind,
    pub delta: f64,
    pub rng_seed: u64,
}

impl InterventionSpec {
    pub fn new(
        layer_id: &str,
        direction_index: usize,
        kind: InterventionKind,
        rng_seed: u64,
    ) -> Self {
        Self {
            layer_id: layer_id.to_string(),
            direction_index,
            kind,
            delta: DEFAULT_NOISE_DELTA,
            rng_seed,
        }
    }

    pub fn validate(&self, cache: &SvdCacheEntry) -> Result<()> {
        if self.layer_id != cache.layer_id {
            return Err(Error::Config(format!(
                "intervention on `{}` applied to cache of `{}`",
                self.layer_id, cache.layer_id
            )));
        }
        if self.direction_index == 0 || self.direction_index > cache.k {
            return Err(Error::Config(format!(
                "direction index {} outside 1..={}",
                self.direction_index, cache.k
            )));
        }
        if self.kind == InterventionKind::Noise && (self.delta.is_nan() || self.delta <= 0.0) {
            return Err(Error::Config(format!(
                "noise delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// The Gaussian multiplier `η ~ N(0, δ²)` used by a Noise intervention.
    pub fn noise_eta(&self) -> f64 {
        self.delta * Stream::new(self.rng_seed).normal()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub spec: InterventionSpec,
    pub sigma_i: f64,
    pub drop: f64,
}

/// `u_iᵀ W v_i` for 1-based `i`.
pub fn component_coefficient(w: &Matrix, cache: &SvdCacheEntry, i: usize) -> Result<f64> {
    let u = cache.u.column(i - 1);
    let v = cache.v.column(i - 1);
    let wv = w.matmul(&Matrix::new(v.len(), 1, v)?)?;
    Ok(dot(&u, wv.data()))
}

/// Apply one rank-1 intervention.
pub fn intervene(w: &Matrix, cache: &SvdCacheEntry, spec: &InterventionSpec) -> Result<Matrix> {
    spec.validate(cache)?;
    if w.shape() != (cache.rows(), cache.cols()) {
        return Err(Error::dim(format!(
            "weight {:?} against a {}x{} cache",
            w.shape(),
            cache.rows(),
            cache.cols()
        )));
    }
    let i = spec.direction_index;
    let c = component_coefficient(w, cache, i)?;
    let factor = match spec.kind {
        InterventionKind::Zero => -c,
        InterventionKind::Flip => -2.0 * c,
        InterventionKind::Noise => spec.noise_eta() * c,
    };
    let u = cache.u.column(i - 1);
    let v = cache.v.column(i - 1);
    let mut out = w.clone();
    for (r, ur) in u.iter().enumerate() {
        for (col, vc) in v.iter().enumerate() {
            let x = out.get(r, col) + factor * ur * vc;
            out.set(r, col, x);
        }
    }
    Ok(out)
}

fn log_sigma(records: &[ProbeRecord]) -> Vec<f64> {
    records.iter().map(|r| r.sigma_i.ln_1p()).collect()
}

fn drops(records: &[ProbeRecord]) -> Vec<f64> {
    records.iter().map(|r| r.drop).collect()
}

/// Pearson r of `(log(1+σ_i), drop_i)` with a two-sided t p-value.
pub fn pearson_log_sigma(records: &[ProbeRecord]) -> Result<Correlation> {
    let r = pearson(&log_sigma(records), &drops(records))?;
    Ok(Correlation {
        r,
        n: records.len(),
        p_value: Some(t_test_p_value(r, records.len())),
    })
}

/// Spearman ρ of `(σ_i, drop_i)`; exact permutation p-value for `n ≤ 8`.
pub fn spearman_sigma(records: &[ProbeRecord]) -> Result<Correlation> {
    let x: Vec<f64> = records.iter().map(|r| r.sigma_i).collect();
    let y = drops(records);
    let r = spearman(&x, &y)?;
    Ok(Correlation {
        r,
        n: records.len(),
        p_value: Some(spearman_p_value(&x, &y)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropBin {
    /// Mean `log(1+σ)` of the bin's records.
    pub center: f64,
    pub mean_drop: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Quantile bins on `log(1+σ)`: records sorted by it (stably) and cut into
/// `n_bins` contiguous groups whose sizes differ by at most one.
pub fn binned_drops(records: &[ProbeRecord], n_bins: usize) -> Result<Vec<DropBin>> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be >= 1".into()));
    }
    if records.len() < n_bins {
        return Err(Error::Empty(format!(
            "{} records cannot fill {n_bins} bins",
            records.len()
        )));
    }
    let x = log_sigma(records);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let (base, extra) = (records.len() / n_bins, records.len() % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let len = base + usize::from(b < extra);
        let idx = &order[start..start + len];
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ds: Vec<f64> = idx.iter().map(|&i| records[i].drop).collect();
        bins.push(DropBin {
            center: mean(&xs),
            mean_drop: mean(&ds),
            std_error: sample_std(&ds) / (len as f64).sqrt(),
            n: len,
        });
        start += len;
    }
    Ok(bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCi {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    /// Resamples discarded for zero variance and drawn again.
    pub redraws: usize,
}

/// Resamples allowed per replicate before giving up.
const MAX_REDRAWS_PER_REPLICATE: usize = 100;

/// Percentile 95% bootstrap CI of [`pearson_log_sigma`] over resampled records.
pub fn corr_bootstrap_ci(
    records: &[ProbeRecord],
    replicates: usize,
    rng_seed: u64,
) -> Result<CorrelationCi> {
    let x = log_sigma(records);
    let y = drops(records);
    pearson(&x, &y)?;
    if replicates == 0 {
        return Err(Error::Config(
            "bootstrap needs at least one replicate".into(),
        ));
    }
    let n = records.len();
    let mut stream = Stream::new(rng_seed);
    let mut stats = Vec::with_capacity(replicates);
    let mut redraws = 0usize;
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    while stats.len() < replicates {
        for j in 0..n {
            let i = stream.below(n);
            bx[j] = x[i];
            by[j] = y[i];
        }
        match pearson(&bx, &by) {
            Ok(r) => stats.push(r),
            Err(Error::DegenerateData(_)) => {
                redraws += 1;
                if redraws > MAX_REDRAWS_PER_REPLICATE * replicates {
                    return Err(Error::DegenerateData(format!(
                        "{redraws} degenerate resamples; giving up"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    if redraws > 0 {
        info!("correlation bootstrap redrew {redraws} degenerate resamples");
    }
    let (lo, hi) = percentile_ci(stats, 0.95);
    Ok(CorrelationCi {
        lo,
        hi,
        level: 0.95,
        redraws,
    })
}

/// Seed for the intervention on `(layer, i, kind)` under `seed`.
pub fn spec_seed(seed: u64, layer_id: &str, i: usize, kind: InterventionKind) -> u64 {
    derive_seed(
        derive_seed(seed, label_seed(layer_id)),
        (i as u64) << 2 | kind as u64,
    )
}

/// Every `(layer, direction, kind)` spec over the cached directions.
pub fn sweep_specs(
    caches: &LayerCaches,
    kinds: &[InterventionKind],
    delta: f64,
    seed: u64,
) -> Vec<InterventionSpec> {
    let mut out = Vec::new();
    for (id, c) in caches {
        for i in 1..=c.k {
            for &kind in kinds {
                out.push(InterventionSpec {
                    layer_id: id.clone(),
                    direction_index: i,
                    kind,
                    delta,
                    rng_seed: spec_seed(seed, id, i, kind),
                });
            }
        }
    }
    out
}

/// Accuracy drop (percentage points) of each intervention on `eval`.
/// Specs are evaluated in parallel; the output order follows `specs`.
pub fn run_sweep(
    backbone: &Backbone,
    caches: &LayerCaches,
    eval: &Batch,
    specs: &[InterventionSpec],
) -> Result<Vec<ProbeRecord>> {
    let weights: Vec<&Matrix> = backbone.layers.iter().map(|l| &l.weight).collect();
    let base = accuracy(&weights, eval)?;
    specs
        .par_iter()
        .map(|spec| {
            let cache = caches
                .get(&spec.layer_id)
                .ok_or_else(|| Error::Config(format!("no cache for layer `{}`", spec.layer_id)))?;
            let pos = backbone
                .layers
                .iter()
                .position(|l| l.layer_id == spec.layer_id)
                .ok_or_else(|| {
                    Error::Config(format!("backbone lacks layer `{}`", spec.layer_id))
                })?;
            let edited = intervene(&backbone.layers[pos].weight, cache, spec)?;
            let mut ws = weights.clone();
            ws[pos] = &edited;
            Ok(ProbeRecord {
                spec: spec.clone(),
                sigma_i: cache.sigma[spec.direction_index - 1],
                drop: base - accuracy(&ws, eval)?,
            })
        })
        .collect()
}

/// Statistics for one intervention kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub pearson_log_sigma: Option<Correlation>,
    pub spearman_sigma: Option<Correlation>,
    pub pearson_ci: Option<CorrelationCi>,
    pub bins: Vec<DropBin>,
    /// Why statistics are missing, when they are.
    pub note: Option<String>,
}

/// Contents of `probe_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub replicates: usize,
    pub n_bins: usize,
    pub records: Vec<ProbeRecord>,
    pub by_kind: BTreeMap<InterventionKind, KindSummary>,
}

/// Summarize records per kind. Degenerate kinds are reported with a note
/// rather than failing the whole report.
pub fn summarize(
    records: Vec<ProbeRecord>,
    n_bins: usize,
    replicates: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let mut by_kind = BTreeMap::new();
    for kind in InterventionKind::ALL {
        let rs: Vec<ProbeRecord> = records
            .iter()
            .filter(|r| r.spec.kind == kind)
            .cloned()
            .collect();
        if rs.is_empty() {
            continue;
        }
        let bins = binned_drops(&rs, n_bins.min(rs.len()))?;
        let summary = match (pearson_log_sigma(&rs), spearman_sigma(&rs)) {
            (Ok(p), Ok(s)) => KindSummary {
                pearson_log_sigma: Some(p),
                spearman_sigma: Some(s),
                pearson_ci: Some(corr_bootstrap_ci(
                    &rs,
                    replicates,
                    derive_seed(seed, kind as u64),
                )?),
                bins,
                note: None,
            },
            (Err(e), _) | (_, Err(e)) => KindSummary {
                pearson_log_sigma: None,
                spearman_sigma: None,
                pearson_ci: None,
                bins,
                note: Some(e.to_string()),
            },
        };
        by_kind.insert(kind, summary);
    }
    Ok(ProbeReport {
        seed,
        replicates,
        n_bins,
        records,
        by_kind,
    })
}
