//! Sequential training over the task pool with AvgAcc and Forgetting.

use spectral_adapt::bench::{
    bench_train_config, continual_train, make_world, world_caches, MethodSpec, WorldConfig,
};
use spectral_adapt::error::Result;

fn main() -> Result<()> {
    let world = make_world(&WorldConfig::default())?;
    let caches = world_caches(&world.backbone, 8, world.config.seed)?;
    let sequence = world.pool_ids();
    for method in [MethodSpec::hip(0.3, 1.0), MethodSpec::lora()] {
        let rep = continual_train(
            &world,
            &caches,
            &method,
            &sequence,
            &bench_train_config(),
            42,
            8,
            4,
        )?;
        println!(
            "{}: AvgAcc {:.2}, Forgetting {:.2}",
            rep.method,
            rep.avg_acc,
            rep.forgetting.unwrap_or(0.0)
        );
        for (t, row) in rep.acc.iter().enumerate() {
            println!("    after {}: {:.1?}", rep.sequence[t], row);
        }
    }
    Ok(())
}
