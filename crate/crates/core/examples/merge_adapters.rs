//! Training-free merging of independently trained adapters: the cheap
//! gain-sum route, the dense route and TIES.

use spectral_adapt::bench::pipeline::evaluate_weights;
use spectral_adapt::bench::{
    bench_train_config, make_world, train_task, world_caches, MethodSpec, WorldConfig,
};
use spectral_adapt::error::Result;
use spectral_adapt::merge::{merge, merge_addition, merge_addition_dense, MergeConfig, MergeRule};

fn main() -> Result<()> {
    let world = make_world(&WorldConfig::default())?;
    let caches = world_caches(&world.backbone, 8, world.config.seed)?;
    let cfg = bench_train_config();
    let tasks = ["task0", "task1", "task2", "task3"];
    for method in [MethodSpec::hip(0.3, 1.0), MethodSpec::lora()] {
        let adapters = tasks
            .iter()
            .map(|t| train_task(&world, &caches, &method, t, 42, &cfg, 8, 4))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = adapters.iter().collect();
        let fast = merge_addition(&refs, &caches)?;
        let dense = merge_addition_dense(&world.backbone.weights(), &refs, &caches)?;
        let gap = fast
            .iter()
            .map(|(id, w)| w.max_abs_diff(&dense[id]))
            .collect::<Result<Vec<_>>>()?;
        let ties_cfg = MergeConfig {
            rule: MergeRule::Ties,
            ..MergeConfig::default()
        };
        let ties = merge(&refs, &caches, &ties_cfg)?;
        println!(
            "{}: routes agree to {:.1e}",
            method.name,
            gap.iter().cloned().fold(0.0, f64::max)
        );
        for task in world.suite() {
            println!(
                "    {:<8} base {:6.2}  add {:6.2}  ties {:6.2}",
                task.task_id,
                evaluate_weights(&world.backbone, &world.backbone.weights(), &task.eval)?,
                evaluate_weights(&world.backbone, &fast, &task.eval)?,
                evaluate_weights(&world.backbone, &ties, &task.eval)?,
            );
        }
    }
    Ok(())
}
