//! The end-to-end benchmark: train single-task adapters for every method,
//! task and seed; score retention; sample and score merges.

use std::collections::BTreeMap;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::ScoreCard;
use super::world::{make_world, World, WorldConfig, RETENTION_TASK};
use crate::adapter::{Adapter, AdapterConfig, Mode};
use crate::cache::{build_cache_ranked, by_layer, fingerprint, LayerCaches};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::merge::{
    merge, merge_fail_rate, paired_bootstrap_ci, paired_difference_ci, pooled_mean,
    sample_merge_instances, MergeConfig, MergeInstance,
};
use crate::model::{accuracy, Backbone, Batch};
use crate::objective::{effective_weights, StabilityConfig};
use crate::rng::{derive_seed, PRNG_ID};
use crate::trainer::{init_adapter, train, TrainConfig};

/// One adapter recipe under comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub mode: Mode,
    pub lambda_stab: f64,
    pub gamma: f64,
    pub no_stability_reg: bool,
    pub no_residual_proj: bool,
    pub gaussian_init: bool,
    /// Residual scale numerator; `None` means `2r`.
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl MethodSpec {
    pub fn hip(lambda_stab: f64, gamma: f64) -> Self {
        Self {
            name: "hip".into(),
            mode: Mode::HiP,
            lambda_stab,
            gamma,
            no_stability_reg: false,
            no_residual_proj: false,
            gaussian_init: true,
            alpha: None,
        }
    }

    pub fn lora() -> Self {
        Self {
            name: "lora".into(),
            mode: Mode::PlainLoRA,
            lambda_stab: 0.0,
            gamma: 0.0,
            ..Self::hip(0.0, 0.0)
        }
    }

    pub fn projlora() -> Self {
        Self {
            name: "projlora".into(),
            mode: Mode::ProjLoRA,
            lambda_stab: 0.0,
            gamma: 0.0,
            ..Self::hip(0.0, 0.0)
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn adapter_config(&self, k: usize, r: usize, seed: u64) -> AdapterConfig {
        let mut c = AdapterConfig::new(k, r, self.mode, seed);
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        c
    }

    pub fn stability(&self) -> StabilityConfig {
        StabilityConfig::new(self.lambda_stab, self.gamma)
    }

    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            no_stability_reg: self.no_stability_reg,
            no_residual_proj: self.no_residual_proj,
            gaussian_init: self.gaussian_init,
            ..base.clone()
        }
    }
}

/// The default comparison: HiP (λ = 0.3, γ = 1), plain LoRA, Proj-LoRA.
pub fn default_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::hip(0.3, 1.0),
        MethodSpec::lora(),
        MethodSpec::projlora(),
    ]
}

/// HiP and its three single-switch ablations.
pub fn ablation_methods() -> Vec<MethodSpec> {
    let full = MethodSpec::hip(0.3, 1.0);
    vec![
        full.clone(),
        MethodSpec {
            no_stability_reg: true,
            ..full.clone()
        }
        .named("hip-no-stability-reg"),
        MethodSpec {
            no_residual_proj: true,
            ..full.clone()
        }
        .named("hip-no-residual-proj"),
        MethodSpec {
            gaussian_init: false,
            ..full
        }
        .named("hip-zero-init"),
    ]
}

/// Desk-scale training defaults: the reference optimizer settings with 300
/// steps instead of 2000.
pub fn bench_train_config() -> TrainConfig {
    TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub world: WorldConfig,
    pub k: usize,
    pub r: usize,
    pub train: TrainConfig,
    pub merge: MergeConfig,
    /// Training seeds; every (method, task) is trained once per seed.
    pub seeds: Vec<u64>,
    pub merge_sizes: Vec<usize>,
    pub methods: Vec<MethodSpec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            k: 8,
            r: 4,
            train: bench_train_config(),
            merge: MergeConfig::default(),
            seeds: vec![42, 100, 2024],
            merge_sizes: vec![2, 4],
            methods: default_methods(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.merge.validate()?;
        if self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::Config(
                "bench needs at least one seed and one method".into(),
            ));
        }
        if self.k == 0 || self.r == 0 {
            return Err(Error::Config("k and r must be >= 1".into()));
        }
        let mut names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.methods.len() {
            return Err(Error::Config("method names must be unique".into()));
        }
        Ok(())
    }
}

/// Cache rank per layer: `min(k, min(m, n) / 2)`, at least 1.
pub fn layer_rank(k: usize, rows: usize, cols: usize) -> usize {
    k.min(rows.min(cols) / 2).max(1)
}

/// SVD cache over every backbone layer with [`layer_rank`] ranks.
pub fn world_caches(backbone: &Backbone, k: usize, seed: u64) -> Result<LayerCaches> {
    let weights = backbone.weights();
    let ranks = weights
        .iter()
        .map(|(id, w)| (id.clone(), layer_rank(k, w.rows(), w.cols())))
        .collect();
    Ok(by_layer(build_cache_ranked(&weights, &ranks, seed)?))
}

/// SVD cache for spectral probing: rank `min(k, min(m, n))` per layer.
pub fn probe_caches(backbone: &Backbone, k: usize, seed: u64) -> Result<LayerCaches> {
    let weights = backbone.weights();
    let ranks = weights
        .iter()
        .map(|(id, w)| (id.clone(), k.min(w.rows().min(w.cols())).max(1)))
        .collect();
    Ok(by_layer(build_cache_ranked(&weights, &ranks, seed)?))
}

/// Accuracy (percent) of the adapted backbone on `batch`.
pub fn evaluate(
    backbone: &Backbone,
    adapter: &Adapter,
    caches: &LayerCaches,
    batch: &Batch,
) -> Result<f64> {
    let w = effective_weights(backbone, adapter, caches)?;
    accuracy(&w.iter().collect::<Vec<_>>(), batch)
}

/// Accuracy with merged layer weights substituted into the backbone.
pub fn evaluate_weights(
    backbone: &Backbone,
    merged: &BTreeMap<String, Matrix>,
    batch: &Batch,
) -> Result<f64> {
    let w: Vec<&Matrix> = backbone
        .layers
        .iter()
        .map(|l| merged.get(&l.layer_id).unwrap_or(&l.weight))
        .collect();
    accuracy(&w, batch)
}

/// Scores of the frozen backbone on the whole suite.
pub fn base_scores_of(world: &World) -> Result<BTreeMap<String, f64>> {
    let w: Vec<&Matrix> = world.backbone.layers.iter().map(|l| &l.weight).collect();
    world
        .suite()
        .into_iter()
        .map(|t| Ok((t.task_id.clone(), accuracy(&w, &t.eval)?)))
        .collect()
}

/// Scores of an adapted backbone on the whole suite.
pub fn suite_scores(
    world: &World,
    adapter: &Adapter,
    caches: &LayerCaches,
) -> Result<BTreeMap<String, f64>> {
    let w = effective_weights(&world.backbone, adapter, caches)?;
    let refs: Vec<&Matrix> = w.iter().collect();
    world
        .suite()
        .into_iter()
        .map(|t| Ok((t.task_id.clone(), accuracy(&refs, &t.eval)?)))
        .collect()
}

/// Train one adapter for `method` on pool task `task_id` with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    world: &World,
    caches: &LayerCaches,
    method: &MethodSpec,
    task_id: &str,
    seed: u64,
    base_cfg: &TrainConfig,
    k: usize,
    r: usize,
) -> Result<Adapter> {
    let task = world
        .task(task_id)
        .ok_or_else(|| Error::Config(format!("unknown task `{task_id}`")))?;
    let run_seed = derive_seed(seed, crate::rng::label_seed(task_id));
    let cfg = method.train_config(base_cfg, run_seed);
    let adapter = init_adapter(&method.adapter_config(k, r, run_seed), caches, &cfg)?;
    Ok(train(
        adapter,
        &world.backbone,
        caches,
        &task.train,
        &cfg,
        &method.stability(),
    )?
    .0)
}

/// Share of `Σ σ_i φ_i²` carried by the top quarter (at least one) of each
/// layer's cached directions.
pub fn top_quartile_share(adapter: &Adapter, caches: &LayerCaches) -> f64 {
    let (mut top, mut all) = (0.0, 0.0);
    for (id, st) in &adapter.layers {
        let sigma = &caches[id].sigma;
        let q = (sigma.len() / 4).max(1);
        for (i, (p, s)) in st.phi.iter().zip(sigma).enumerate() {
            let e = s * p * p;
            all += e;
            if i < q {
                top += e;
            }
        }
    }
    if all == 0.0 {
        0.0
    } else {
        top / all
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub seed: u64,
    pub scorecard: ScoreCard,
    pub phi_energy: f64,
    pub top_quartile_share: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub t: usize,
    pub rule: String,
    pub merge_fail: f64,
    pub merge_fail_ci: (f64, f64),
    pub mean_abs_drop: f64,
    /// Per sampling seed.
    pub instances: BTreeMap<u64, Vec<MergeInstance>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub spec: MethodSpec,
    pub runs: Vec<RunRecord>,
    pub per_task: BTreeMap<String, TaskSummary>,
    pub retain: f64,
    pub retain_ci: (f64, f64),
    pub in_domain_gain: f64,
    pub phi_energy: f64,
    pub top_quartile_share: f64,
    pub merges: BTreeMap<String, MergeSummary>,
}

/// Paired MergeFail difference (method − baseline) for one merge size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: String,
    pub baseline: String,
    pub t: usize,
    pub merge_fail_diff: f64,
    pub merge_fail_diff_ci: (f64, f64),
    pub retain_diff: f64,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub prng_id: String,
    pub backbone_id: String,
    pub cache_fingerprint: String,
    pub base_scores: BTreeMap<String, f64>,
    pub methods: BTreeMap<String, MethodReport>,
    pub comparisons: Vec<Comparison>,
}

type Trained = BTreeMap<(String, String, u64), Adapter>;

fn train_all(
    world: &World,
    caches: &LayerCaches,
    cfg: &BenchConfig,
    sequential: bool,
) -> Result<Trained> {
    let mut jobs = Vec::new();
    for m in &cfg.methods {
        for task in world.pool_ids() {
            for &seed in &cfg.seeds {
                jobs.push((m, task.clone(), seed));
            }
        }
    }
    let run =
        |(m, task, seed): &(&MethodSpec, String, u64)| -> Result<((String, String, u64), Adapter)> {
            let a = train_task(world, caches, m, task, *seed, &cfg.train, cfg.k, cfg.r)?;
            Ok(((m.name.clone(), task.clone(), *seed), a))
        };
    let out: Vec<_> = if sequential {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    Ok(out.into_iter().collect())
}

/// Trained adapters of one method keyed by `(task, seed)`.
pub type AdapterPool = BTreeMap<(String, u64), Adapter>;

/// Sample merge instances of size `t` over `adapters`, one list per merge
/// sampling seed, and score each against the single-adapter scores.
/// `method_id` only labels the run; the draws do not depend on it.
pub fn score_merges(
    world: &World,
    caches: &LayerCaches,
    merge_cfg: &MergeConfig,
    train_seeds: &[u64],
    t: usize,
    method_id: &str,
    adapters: &AdapterPool,
) -> Result<MergeSummary> {
    let mut pool: Vec<String> = adapters.keys().map(|(task, _)| task.clone()).collect();
    pool.dedup();
    let mut single = BTreeMap::new();
    for ((task, seed), a) in adapters {
        let eval = &world
            .task(task)
            .ok_or_else(|| Error::Config(format!("unknown task `{task}`")))?
            .eval;
        single.insert(
            (task.clone(), *seed),
            evaluate(&world.backbone, a, caches, eval)?,
        );
    }
    let mut instances = BTreeMap::new();
    for &s in &merge_cfg.seeds {
        let mut list = sample_merge_instances(
            &pool,
            train_seeds,
            t,
            merge_cfg.n_merge,
            derive_seed(s, t as u64),
            method_id,
        )?;
        for inst in &mut list {
            let mut members = Vec::with_capacity(t);
            for task in &inst.task_subset {
                let key = (task.clone(), inst.seed_assignment[task]);
                members.push(adapters.get(&key).ok_or_else(|| {
                    Error::Config(format!("no adapter for task `{}` seed {}", key.0, key.1))
                })?);
            }
            let merged = merge(&members, caches, merge_cfg)?;
            let mut before = BTreeMap::new();
            let mut after = BTreeMap::new();
            for task in &inst.task_subset {
                before.insert(
                    task.clone(),
                    single[&(task.clone(), inst.seed_assignment[task])],
                );
                after.insert(
                    task.clone(),
                    evaluate_weights(&world.backbone, &merged, &world.task(task).unwrap().eval)?,
                );
            }
            inst.score(before, after, merge_cfg.tau)?;
        }
        instances.insert(s, list);
    }
    let all: Vec<MergeInstance> = instances.values().flatten().cloned().collect();
    let summary = MergeSummary {
        t,
        rule: merge_cfg.rule.to_string(),
        merge_fail: merge_fail_rate(&all)?,
        merge_fail_ci: (0.0, 0.0),
        mean_abs_drop: all.iter().map(MergeInstance::mean_abs_drop).sum::<f64>() / all.len() as f64,
        instances,
    };
    let ci = paired_bootstrap_ci(
        &fail_columns(&summary),
        merge_cfg.bootstrap_replicates,
        0.95,
        derive_seed(t as u64, 17),
    )?;
    Ok(MergeSummary {
        merge_fail_ci: ci,
        ..summary
    })
}

/// Per-sampling-seed failure indicators (1.0 for a failed instance).
pub fn fail_columns(summary: &MergeSummary) -> BTreeMap<u64, Vec<f64>> {
    summary
        .instances
        .iter()
        .map(|(s, l)| {
            (
                *s,
                l.iter().map(|i| if i.failed { 1.0 } else { 0.0 }).collect(),
            )
        })
        .collect()
}

/// Run the benchmark on a prepared world and cache.
pub fn run_bench_on(
    world: &World,
    caches: &LayerCaches,
    cfg: &BenchConfig,
    sequential: bool,
) -> Result<BenchReport> {
    cfg.validate()?;
    let base = base_scores_of(world)?;
    info!(
        "training {} adapters",
        cfg.methods.len() * cfg.seeds.len() * world.pool.len()
    );
    let trained = train_all(world, caches, cfg, sequential)?;

    let mut methods = BTreeMap::new();
    for m in &cfg.methods {
        let mut runs = Vec::new();
        let mut own = AdapterPool::new();
        for task in world.pool_ids() {
            for &seed in &cfg.seeds {
                let a = &trained[&(m.name.clone(), task.clone(), seed)];
                own.insert((task.clone(), seed), a.clone());
                let card = ScoreCard::new(&task, base.clone(), suite_scores(world, a, caches)?)?;
                let t = world.task(&task).unwrap();
                let final_loss = crate::objective::task_loss(
                    &effective_weights(&world.backbone, a, caches)?
                        .iter()
                        .collect::<Vec<_>>(),
                    &t.train,
                )?;
                runs.push(RunRecord {
                    task: task.clone(),
                    seed,
                    scorecard: card,
                    phi_energy: a.phi_energy(),
                    top_quartile_share: top_quartile_share(a, caches),
                    final_loss,
                });
            }
        }
        let n = runs.len() as f64;
        let per_task = world
            .pool_ids()
            .into_iter()
            .map(|task| {
                let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.task == task).collect();
                let after =
                    rs.iter().map(|r| r.scorecard.adapted[&task]).sum::<f64>() / rs.len() as f64;
                let before = base[&task];
                (
                    task,
                    TaskSummary {
                        before,
                        after,
                        delta: after - before,
                    },
                )
            })
            .collect();
        let retain_by_seed: BTreeMap<u64, Vec<f64>> = cfg
            .seeds
            .iter()
            .map(|s| {
                (
                    *s,
                    runs.iter()
                        .filter(|r| r.seed == *s)
                        .map(|r| r.scorecard.retain)
                        .collect(),
                )
            })
            .collect();
        let mut merges = BTreeMap::new();
        for &t in &cfg.merge_sizes {
            if t > world.pool.len() {
                continue;
            }
            merges.insert(
                format!("t{t}"),
                score_merges(world, caches, &cfg.merge, &cfg.seeds, t, &m.name, &own)?,
            );
        }
        methods.insert(
            m.name.clone(),
            MethodReport {
                spec: m.clone(),
                retain: pooled_mean(&retain_by_seed)?,
                retain_ci: paired_bootstrap_ci(
                    &retain_by_seed,
                    cfg.merge.bootstrap_replicates,
                    0.95,
                    23,
                )?,
                in_domain_gain: runs
                    .iter()
                    .map(|r| r.scorecard.in_domain_gain())
                    .sum::<f64>()
                    / n,
                phi_energy: runs.iter().map(|r| r.phi_energy).sum::<f64>() / n,
                top_quartile_share: runs.iter().map(|r| r.top_quartile_share).sum::<f64>() / n,
                runs,
                per_task,
                merges,
            },
        );
    }

    let mut comparisons = Vec::new();
    let baseline = &cfg.methods[0].name;
    let base_report = &methods[baseline];
    for m in cfg.methods.iter().skip(1) {
        let rep = &methods[&m.name];
        for (key, summary) in &rep.merges {
            let b = &base_report.merges[key];
            let (diff_ci, _) = paired_difference_ci(
                &fail_columns(b),
                &fail_columns(summary),
                cfg.merge.bootstrap_replicates,
                0.95,
                derive_seed(summary.t as u64, 29),
            )?;
            comparisons.push(Comparison {
                method: m.name.clone(),
                baseline: baseline.clone(),
                t: summary.t,
                merge_fail_diff: summary.merge_fail - b.merge_fail,
                merge_fail_diff_ci: diff_ci,
                retain_diff: rep.retain - base_report.retain,
            });
        }
    }

    Ok(BenchReport {
        config: cfg.clone(),
        prng_id: PRNG_ID.to_string(),
        backbone_id: world.backbone.id.clone(),
        cache_fingerprint: fingerprint(caches),
        base_scores: base,
        methods,
        comparisons,
    })
}

/// Build the world and cache from `cfg`, then run the benchmark.
pub fn run_bench(cfg: &BenchConfig, sequential: bool) -> Result<BenchReport> {
    let world = make_world(&cfg.world)?;
    let caches = world_caches(&world.backbone, cfg.k, cfg.world.seed)?;
    run_bench_on(&world, &caches, cfg, sequential)
}

/// Retention-suite ids, retention task first.
pub fn suite_ids(world: &World) -> Vec<String> {
    std::iter::once(RETENTION_TASK.to_string())
        .chain(world.pool_ids())
        .collect()
}
