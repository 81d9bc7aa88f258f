//! Desk-scale experimental world and the benchmark pipeline built on it.

pub mod continual;
pub mod metrics;
pub mod pipeline;
pub mod world;

pub use continual::{continual_train, ContinualReport};
pub use metrics::{avgacc_and_forgetting, edit_success, forgetting, retain_metric, ScoreCard};
pub use pipeline::{
    ablation_methods, base_scores_of, bench_train_config, default_methods, evaluate, run_bench,
    run_bench_on, train_task, world_caches, BenchConfig, BenchReport, MethodSpec,
};
pub use world::{make_world, World, WorldConfig, RETENTION_TASK};
