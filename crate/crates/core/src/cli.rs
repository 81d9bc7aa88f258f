//! Command-line driver. Every subcommand resolves its configuration as
//! flags > `--config` file > built-in defaults and writes the result to
//! `resolved_config.json` in its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapter::{load_adapter, save_adapter, AdapterConfig, Mode};
use crate::bench::pipeline::{probe_caches, score_merges, suite_scores, AdapterPool};
use crate::bench::{
    base_scores_of, continual_train, make_world, run_bench, BenchConfig, MethodSpec, ScoreCard,
    World, WorldConfig,
};
use crate::cache::{build_cache, by_layer, load_cache, save_cache, CacheManifest, LayerCaches};
use crate::error::{Error, Result};
use crate::merge::{merge, MergeConfig, MergeRule};
use crate::model::Backbone;
use crate::objective::StabilityConfig;
use crate::probe::{run_sweep, summarize, sweep_specs, InterventionKind};
use crate::report::{
    read_json, write_json, MergeFailSummary, MergeReport, BENCH_REPORT_FILE, CONTINUAL_FILE,
    MERGE_REPORT_FILE, PROBE_REPORT_FILE, RESOLVED_CONFIG_FILE, SCORECARD_FILE, TRACE_FILE,
};
use crate::trainer::{init_adapter, save_trace, train, TrainConfig};

pub const THREADS_ENV: &str = "SPECTRAL_ADAPT_THREADS";
pub const WORLD_FILE: &str = "world.json";
pub const BACKBONE_FILE: &str = "backbone.json";
pub const MERGED_BACKBONE_FILE: &str = "merged_backbone.json";

/// Process exit code for an error; one code per failure class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotFound(_) => 2,
        Error::Dimension(_) | Error::Layer { .. } => 3,
        Error::CorruptCache(_) | Error::CorruptAdapter(_) => 4,
        Error::Version { .. } => 5,
        Error::IncompatibleBackbone(_) => 6,
        Error::Config(_) | Error::Json(_) => 7,
        Error::Diverged { .. } => 8,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "spectral-adapt",
    version,
    about = "Spectrum-aware two-channel low-rank adapters on synthetic backbones"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic world (backbone + task definitions)
    World(WorldArgs),
    /// Build the truncated-SVD cache of a backbone
    SvdCache(SvdCacheArgs),
    /// Train one adapter on one task of a world
    Train(TrainArgs),
    /// Merge trained adapters and score sampled merge instances
    Merge(MergeArgs),
    /// Rank-1 spectral interventions and σ/drop correlations
    Probe(ProbeArgs),
    /// Train one adapter sequentially over a task sequence
    Continual(ContinualArgs),
    /// Full benchmark: adapters for every method, task and seed, Retain, merges
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; flags override its values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for the subcommand's random choices
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct WorldArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SvdCacheArgs {
    #[command(flatten)]
    pub common: Common,
    /// Backbone JSON written by `world`
    #[arg(long, value_name = "PATH")]
    pub backbone: Option<PathBuf>,
    /// Cached singular directions per layer [default: 8]
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AdapterFlags {
    /// Adapter family: hip | lora | projlora [default: hip]
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Residual rank [default: 4]
    #[arg(long)]
    pub r: Option<usize>,
    /// Residual scale numerator, s = alpha / r [default: 2r]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Stability budget weight [default: 0.3]
    #[arg(long)]
    pub lambda_stab: Option<f64>,
    /// Spectral exponent of the budget weights [default: 1.0]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Optimizer steps [default: 2000 for train, 300 per stage elsewhere]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Peak learning rate [default: 2e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Start B from N(0, 1/m) instead of zero
    #[arg(long)]
    pub gaussian_init: bool,
    /// Drop the stability term (ablation)
    #[arg(long)]
    pub no_stability_reg: bool,
    /// Skip the residual projection (ablation)
    #[arg(long)]
    pub no_residual_proj: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// World directory written by `world`
    #[arg(long, value_name = "DIR")]
    pub world: Option<PathBuf>,
    /// Cache directory written by `svd-cache`
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Pool task to train on [default: task0]
    #[arg(long)]
    pub task: Option<String>,
    #[command(flatten)]
    pub adapter: AdapterFlags,
}

#[derive(Args, Debug)]
pub struct MergeFlags {
    /// Failure threshold, strict after < tau * before [default: 0.9]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Merge rule: add | ties [default: add]
    #[arg(long)]
    pub merge_rule: Option<MergeRule>,
    /// Instances per sampling seed [default: 20]
    #[arg(long)]
    pub n_merge: Option<usize>,
    /// Bootstrap replicates [default: 10000]
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[command(flatten)]
    pub common: Common,
    /// World directory written by `world`
    #[arg(long, value_name = "DIR")]
    pub world: Option<PathBuf>,
    /// Cache directory shared by all adapters
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Adapter directories written by `train`
    #[arg(long, value_name = "DIR", num_args = 1..)]
    pub adapters: Vec<PathBuf>,
    /// Tasks per sampled merge instance [default: number of distinct tasks]
    #[arg(long)]
    pub t: Option<usize>,
    #[command(flatten)]
    pub merge: MergeFlags,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    /// World directory written by `world`
    #[arg(long, value_name = "DIR")]
    pub world: Option<PathBuf>,
    /// Task whose eval set scores the interventions [default: general]
    #[arg(long)]
    pub task: Option<String>,
    /// Probed directions per layer, clamped to the layer size [default: 32]
    #[arg(long)]
    pub k: Option<usize>,
    /// Noise intervention std [default: 0.1]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Bootstrap replicates for the correlation CI [default: 10000]
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ContinualArgs {
    #[command(flatten)]
    pub common: Common,
    /// World directory written by `world`
    #[arg(long, value_name = "DIR")]
    pub world: Option<PathBuf>,
    /// Comma-separated task sequence [default: the whole pool]
    #[arg(long, value_delimiter = ',')]
    pub sequence: Vec<String>,
    /// Cached directions per layer, at most half the smaller side [default: 8]
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub adapter: AdapterFlags,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Cached directions per layer, at most half the smaller side [default: 8]
    #[arg(long)]
    pub k: Option<usize>,
    /// Residual rank [default: 4]
    #[arg(long)]
    pub r: Option<usize>,
    /// Residual scale numerator for every method [default: 2r]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Keep only methods of this family
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Stability weight of the HiP methods [default: 0.3]
    #[arg(long)]
    pub lambda_stab: Option<f64>,
    /// Spectral exponent of the HiP methods [default: 1.0]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Optimizer steps per adapter [default: 300]
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub merge: MergeFlags,
    /// Run every job on the calling thread
    #[arg(long)]
    pub sequential: bool,
}

/// Resolved `world` configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldRun {
    pub world: WorldConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvdCacheRun {
    pub backbone: PathBuf,
    pub k: usize,
    pub seed: u64,
}

impl Default for SvdCacheRun {
    fn default() -> Self {
        Self {
            backbone: PathBuf::from("world").join(BACKBONE_FILE),
            k: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub world: PathBuf,
    pub cache: PathBuf,
    pub task: String,
    pub mode: Mode,
    pub r: usize,
    pub alpha: Option<f64>,
    pub stability: StabilityConfig,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            world: PathBuf::from("world"),
            cache: PathBuf::from("cache"),
            task: "task0".into(),
            mode: Mode::HiP,
            r: 4,
            alpha: None,
            stability: StabilityConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeRun {
    pub world: PathBuf,
    pub cache: PathBuf,
    pub adapters: Vec<PathBuf>,
    pub t: Option<usize>,
    pub merge: MergeConfig,
}

impl Default for MergeRun {
    fn default() -> Self {
        Self {
            world: PathBuf::from("world"),
            cache: PathBuf::from("cache"),
            adapters: Vec::new(),
            t: None,
            merge: MergeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeRun {
    pub world: PathBuf,
    pub task: String,
    pub k: usize,
    pub kinds: Vec<InterventionKind>,
    pub delta: f64,
    pub replicates: usize,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for ProbeRun {
    fn default() -> Self {
        Self {
            world: PathBuf::from("world"),
            task: crate::bench::RETENTION_TASK.into(),
            k: 32,
            kinds: InterventionKind::ALL.to_vec(),
            delta: crate::probe::DEFAULT_NOISE_DELTA,
            replicates: 10_000,
            n_bins: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualRun {
    pub world: PathBuf,
    pub sequence: Vec<String>,
    pub k: usize,
    pub r: usize,
    pub method: MethodSpec,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ContinualRun {
    fn default() -> Self {
        Self {
            world: PathBuf::from("world"),
            sequence: Vec::new(),
            k: 8,
            r: 4,
            method: MethodSpec::hip(0.3, 1.0),
            train: crate::bench::bench_train_config(),
            seed: 42,
        }
    }
}

/// Defaults, overlaid with the `--config` file when given.
fn base_config<T: Default + DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn persist<T: Serialize>(out: &Path, resolved: &T) -> Result<()> {
    write_json(&out.join(RESOLVED_CONFIG_FILE), resolved)
}

/// Regenerate a world from its directory and check it against the stored
/// backbone.
pub fn load_world(dir: &Path) -> Result<World> {
    let cfg: WorldConfig = read_json(&dir.join(WORLD_FILE))?;
    let world = make_world(&cfg)?;
    let stored = Backbone::load(&dir.join(BACKBONE_FILE))?;
    if stored != world.backbone {
        return Err(Error::IncompatibleBackbone(format!(
            "{} does not match the world generated from {}",
            dir.join(BACKBONE_FILE).display(),
            dir.join(WORLD_FILE).display()
        )));
    }
    Ok(world)
}

fn load_caches_for(dir: &Path, backbone: &Backbone) -> Result<LayerCaches> {
    let (entries, manifest) = load_cache(dir)?;
    if manifest.backbone_id != backbone.id {
        return Err(Error::IncompatibleBackbone(format!(
            "cache built for `{}`, backbone is `{}`",
            manifest.backbone_id, backbone.id
        )));
    }
    Ok(by_layer(entries))
}

fn apply_adapter_flags(f: &AdapterFlags, train: &mut TrainConfig) {
    if let Some(s) = f.steps {
        train.steps = s;
    }
    if let Some(lr) = f.lr {
        train.lr = lr;
    }
    train.gaussian_init |= f.gaussian_init;
    train.no_stability_reg |= f.no_stability_reg;
    train.no_residual_proj |= f.no_residual_proj;
}

fn apply_merge_flags(f: &MergeFlags, m: &mut MergeConfig) {
    if let Some(t) = f.tau {
        m.tau = t;
    }
    if let Some(r) = f.merge_rule {
        m.rule = r;
    }
    if let Some(n) = f.n_merge {
        m.n_merge = n;
    }
    if let Some(r) = f.replicates {
        m.bootstrap_replicates = r;
    }
}

pub fn cmd_world(args: &WorldArgs) -> Result<()> {
    let mut run: WorldRun = base_config(args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        run.world.seed = s;
    }
    let out = &args.common.out;
    persist(out, &run)?;
    let world = make_world(&run.world)?;
    write_json(&out.join(WORLD_FILE), &run.world)?;
    world.backbone.save(&out.join(BACKBONE_FILE))?;
    println!(
        "world `{}` with tasks {:?}",
        world.backbone.id,
        world.pool_ids()
    );
    Ok(())
}

pub fn cmd_svd_cache(args: &SvdCacheArgs) -> Result<()> {
    let mut run: SvdCacheRun = base_config(args.common.config.as_deref())?;
    if let Some(p) = &args.backbone {
        run.backbone = p.clone();
    }
    if let Some(k) = args.k {
        run.k = k;
    }
    if let Some(s) = args.common.seed {
        run.seed = s;
    }
    let out = &args.common.out;
    persist(out, &run)?;
    let backbone = Backbone::load(&run.backbone)?;
    let weights = backbone.weights();
    let entries = build_cache(&weights, run.k, run.seed)?;
    let manifest = CacheManifest::describe(&backbone.id, &entries)?;
    save_cache(&entries, &manifest, out)?;
    for e in &entries {
        let w = &weights[&e.layer_id];
        println!(
            "{}: k={} reconstruction error {:.3e}, truncation residual {:.3e} (relative)",
            e.layer_id,
            e.k,
            e.reconstruction_error(w)?,
            e.w_tilde.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE)
        );
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut run: TrainRun = base_config(args.common.config.as_deref())?;
    if let Some(w) = &args.world {
        run.world = w.clone();
    }
    if let Some(c) = &args.cache {
        run.cache = c.clone();
    }
    if let Some(t) = &args.task {
        run.task = t.clone();
    }
    let f = &args.adapter;
    if let Some(m) = f.mode {
        run.mode = m;
    }
    if let Some(r) = f.r {
        run.r = r;
    }
    if f.alpha.is_some() {
        run.alpha = f.alpha;
    }
    if let Some(l) = f.lambda_stab {
        run.stability.lambda_stab = l;
    }
    if let Some(g) = f.gamma {
        run.stability.gamma = g;
    }
    if let Some(s) = args.common.seed {
        run.train.seed = s;
    }
    apply_adapter_flags(f, &mut run.train);
    let out = &args.common.out;
    persist(out, &run)?;

    let world = load_world(&run.world)?;
    let caches = load_caches_for(&run.cache, &world.backbone)?;
    let task = world
        .task(&run.task)
        .ok_or_else(|| Error::Config(format!("unknown task `{}`", run.task)))?;
    let k = caches.values().map(|c| c.k).max().unwrap_or(0);
    let mut acfg = AdapterConfig::new(k, run.r, run.mode, run.train.seed);
    if let Some(a) = run.alpha {
        acfg.alpha = a;
    }
    if run.mode != Mode::HiP && !run.train.gaussian_init {
        warn!(
            "zero-initialized {} factors start at a stationary point; pass --gaussian-init",
            run.mode
        );
    }
    let adapter = init_adapter(&acfg, &caches, &run.train)?;
    let (adapter, trace) = train(
        adapter,
        &world.backbone,
        &caches,
        &task.train,
        &run.train,
        &run.stability,
    )?;
    save_adapter(&adapter, out)?;
    save_trace(&trace, &out.join(TRACE_FILE))?;
    let card = ScoreCard::new(
        &run.task,
        base_scores_of(&world)?,
        suite_scores(&world, &adapter, &caches)?,
    )?;
    write_json(&out.join(SCORECARD_FILE), &card)?;
    let last = trace.last().expect("steps >= 1");
    println!(
        "{} on {}: loss {:.4}, in-domain {:.2} -> {:.2}, Retain {:.3}",
        run.mode, run.task, last.loss, card.base[&run.task], card.adapted[&run.task], card.retain
    );
    Ok(())
}

pub fn cmd_merge(args: &MergeArgs) -> Result<()> {
    let mut run: MergeRun = base_config(args.common.config.as_deref())?;
    if let Some(w) = &args.world {
        run.world = w.clone();
    }
    if let Some(c) = &args.cache {
        run.cache = c.clone();
    }
    if !args.adapters.is_empty() {
        run.adapters = args.adapters.clone();
    }
    if args.t.is_some() {
        run.t = args.t;
    }
    if let Some(s) = args.common.seed {
        run.merge.seeds = vec![s];
    }
    apply_merge_flags(&args.merge, &mut run.merge);
    let out = &args.common.out;
    persist(out, &run)?;
    run.merge.validate()?;
    if run.adapters.is_empty() {
        return Err(Error::Config("no adapters given".into()));
    }

    let world = load_world(&run.world)?;
    let caches = load_caches_for(&run.cache, &world.backbone)?;
    let mut pool = AdapterPool::new();
    let mut loaded = Vec::new();
    for dir in &run.adapters {
        let adapter = load_adapter(dir)?;
        let meta: TrainRun = read_json(&dir.join(RESOLVED_CONFIG_FILE))?;
        loaded.push(adapter.clone());
        if pool
            .insert((meta.task.clone(), meta.train.seed), adapter)
            .is_some()
        {
            return Err(Error::Config(format!(
                "two adapters for task `{}` seed {}",
                meta.task, meta.train.seed
            )));
        }
    }

    let refs: Vec<_> = loaded.iter().collect();
    let merged = merge(&refs, &caches, &run.merge)?;
    let layers = world
        .backbone
        .layers
        .iter()
        .map(|l| {
            (
                l.layer_id.clone(),
                merged.get(&l.layer_id).unwrap_or(&l.weight).clone(),
            )
        })
        .collect();
    Backbone::new(&format!("{}+merged", world.backbone.id), layers)?
        .save(&out.join(MERGED_BACKBONE_FILE))?;

    let mut seeds_by_task: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for (task, seed) in pool.keys() {
        seeds_by_task.entry(task).or_default().push(*seed);
    }
    let train_seeds = seeds_by_task.values().next().cloned().unwrap_or_default();
    if seeds_by_task.values().any(|s| *s != train_seeds) {
        return Err(Error::Config(
            "every task needs adapters for the same training seeds".into(),
        ));
    }
    let t = run.t.unwrap_or(seeds_by_task.len());
    let summary = score_merges(&world, &caches, &run.merge, &train_seeds, t, "cli", &pool)?;
    let report = MergeReport {
        cache_fingerprint: crate::cache::fingerprint(&caches),
        summaries: vec![MergeFailSummary {
            rule: summary.rule.clone(),
            t,
            tau: run.merge.tau,
            merge_fail: summary.merge_fail,
            ci: summary.merge_fail_ci,
            replicates: run.merge.bootstrap_replicates,
        }],
        instances: summary.instances,
    };
    write_json(&out.join(MERGE_REPORT_FILE), &report)?;
    println!(
        "{} merge, t={t}: MergeFail {:.3} (95% CI {:.3}..{:.3})",
        run.merge.rule, summary.merge_fail, summary.merge_fail_ci.0, summary.merge_fail_ci.1
    );
    Ok(())
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let mut run: ProbeRun = base_config(args.common.config.as_deref())?;
    if let Some(w) = &args.world {
        run.world = w.clone();
    }
    if let Some(t) = &args.task {
        run.task = t.clone();
    }
    if let Some(k) = args.k {
        run.k = k;
    }
    if let Some(d) = args.delta {
        run.delta = d;
    }
    if let Some(r) = args.replicates {
        run.replicates = r;
    }
    if let Some(s) = args.common.seed {
        run.seed = s;
    }
    let out = &args.common.out;
    persist(out, &run)?;
    let world = load_world(&run.world)?;
    let eval = &world
        .task(&run.task)
        .ok_or_else(|| Error::Config(format!("unknown task `{}`", run.task)))?
        .eval;
    let caches = probe_caches(&world.backbone, run.k, run.seed)?;
    let specs = sweep_specs(&caches, &run.kinds, run.delta, run.seed);
    let records = run_sweep(&world.backbone, &caches, eval, &specs)?;
    let report = summarize(records, run.n_bins, run.replicates, run.seed)?;
    write_json(&out.join(PROBE_REPORT_FILE), &report)?;
    for (kind, s) in &report.by_kind {
        match (&s.pearson_log_sigma, &s.pearson_ci) {
            (Some(p), Some(ci)) => println!(
                "{kind}: r = {:.3} (95% CI {:.3}..{:.3}), n = {}",
                p.r, ci.lo, ci.hi, p.n
            ),
            _ => println!("{kind}: {}", s.note.as_deref().unwrap_or("no statistics")),
        }
    }
    Ok(())
}

pub fn cmd_continual(args: &ContinualArgs) -> Result<()> {
    let mut run: ContinualRun = base_config(args.common.config.as_deref())?;
    if let Some(w) = &args.world {
        run.world = w.clone();
    }
    if !args.sequence.is_empty() {
        run.sequence = args.sequence.clone();
    }
    if let Some(k) = args.k {
        run.k = k;
    }
    let f = &args.adapter;
    if let Some(m) = f.mode {
        run.method = match m {
            Mode::HiP => MethodSpec::hip(run.method.lambda_stab, run.method.gamma),
            Mode::PlainLoRA => MethodSpec::lora(),
            Mode::ProjLoRA => MethodSpec::projlora(),
        };
    }
    if let Some(r) = f.r {
        run.r = r;
    }
    if f.alpha.is_some() {
        run.method.alpha = f.alpha;
    }
    if let Some(l) = f.lambda_stab {
        run.method.lambda_stab = l;
    }
    if let Some(g) = f.gamma {
        run.method.gamma = g;
    }
    run.method.gaussian_init |= f.gaussian_init;
    run.method.no_stability_reg |= f.no_stability_reg;
    run.method.no_residual_proj |= f.no_residual_proj;
    apply_adapter_flags(f, &mut run.train);
    if let Some(s) = args.common.seed {
        run.seed = s;
    }
    let out = &args.common.out;
    let world = load_world(&run.world)?;
    if run.sequence.is_empty() {
        run.sequence = world.pool_ids();
    }
    persist(out, &run)?;
    let caches = crate::bench::world_caches(&world.backbone, run.k, world.config.seed)?;
    let report = continual_train(
        &world,
        &caches,
        &run.method,
        &run.sequence,
        &run.train,
        run.seed,
        run.k,
        run.r,
    )?;
    write_json(&out.join(CONTINUAL_FILE), &report)?;
    match report.forgetting {
        Some(f) => println!("AvgAcc {:.2}, Forgetting {:.2}", report.avg_acc, f),
        None => println!(
            "AvgAcc {:.2}, Forgetting undefined for one stage",
            report.avg_acc
        ),
    }
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = base_config(args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        cfg.world.seed = s;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(r) = args.r {
        cfg.r = r;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(mode) = args.mode {
        cfg.methods.retain(|m| m.mode == mode);
    }
    for m in &mut cfg.methods {
        if args.alpha.is_some() {
            m.alpha = args.alpha;
        }
        if m.mode == Mode::HiP {
            if let Some(l) = args.lambda_stab {
                m.lambda_stab = l;
            }
            if let Some(g) = args.gamma {
                m.gamma = g;
            }
        }
    }
    apply_merge_flags(&args.merge, &mut cfg.merge);
    let out = &args.common.out;
    persist(out, &cfg)?;
    info!("bench on world seed {}", cfg.world.seed);
    let report = run_bench(&cfg, args.sequential)?;
    write_json(&out.join(BENCH_REPORT_FILE), &report)?;
    let cards: BTreeMap<&str, Vec<&ScoreCard>> = report
        .methods
        .iter()
        .map(|(name, m)| (name.as_str(), m.runs.iter().map(|r| &r.scorecard).collect()))
        .collect();
    write_json(&out.join(SCORECARD_FILE), &cards)?;
    for (name, m) in &report.methods {
        let fails: Vec<String> = m
            .merges
            .values()
            .map(|s| format!("t={}: {:.3}", s.t, s.merge_fail))
            .collect();
        println!(
            "{name}: Retain {:.3}, in-domain gain {:.2}, MergeFail {}",
            m.retain,
            m.in_domain_gain,
            fails.join(", ")
        );
    }
    Ok(())
}

/// Cap the global thread pool from `SPECTRAL_ADAPT_THREADS`.
fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .is_err()
        {
            warn!("thread pool already initialized; {THREADS_ENV} ignored");
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    configure_threads();
    match &cli.command {
        Command::World(a) => cmd_world(a),
        Command::SvdCache(a) => cmd_svd_cache(a),
        Command::Train(a) => cmd_train(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Continual(a) => cmd_continual(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parse `args` and run; returns the process exit code. Usage errors exit
/// with the configuration code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 7 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
