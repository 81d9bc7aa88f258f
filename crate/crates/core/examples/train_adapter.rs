//! Train one adapter of each family on one synthetic task and compare the
//! in-domain gain with the damage to the rest of the suite.

use spectral_adapt::bench::pipeline::suite_scores;
use spectral_adapt::bench::{
    base_scores_of, bench_train_config, make_world, train_task, world_caches, MethodSpec,
    ScoreCard, WorldConfig,
};
use spectral_adapt::error::Result;

fn main() -> Result<()> {
    let world = make_world(&WorldConfig::default())?;
    let caches = world_caches(&world.backbone, 8, world.config.seed)?;
    let base = base_scores_of(&world)?;
    let cfg = bench_train_config();
    for method in [
        MethodSpec::hip(0.3, 1.0),
        MethodSpec::projlora(),
        MethodSpec::lora(),
    ] {
        let adapter = train_task(&world, &caches, &method, "task2", 42, &cfg, 8, 4)?;
        let card = ScoreCard::new(
            "task2",
            base.clone(),
            suite_scores(&world, &adapter, &caches)?,
        )?;
        println!(
            "{:<9} gain {:+.2} pp, Retain {:.3} pp, sum phi^2 {:.4}",
            method.name,
            card.in_domain_gain(),
            card.retain,
            adapter.phi_energy()
        );
    }
    Ok(())
}
