//! Rank-1 interventions on every cached direction and the correlation of the
//! accuracy drop with the direction's singular value.

use spectral_adapt::bench::pipeline::probe_caches;
use spectral_adapt::bench::{make_world, WorldConfig};
use spectral_adapt::error::Result;
use spectral_adapt::probe::{run_sweep, summarize, sweep_specs, InterventionKind};

fn main() -> Result<()> {
    let world = make_world(&WorldConfig::default())?;
    let caches = probe_caches(&world.backbone, 32, 0)?;
    let specs = sweep_specs(&caches, &InterventionKind::ALL, 0.1, 0);
    let records = run_sweep(&world.backbone, &caches, &world.retention.eval, &specs)?;
    let report = summarize(records, 6, 2000, 0)?;
    for (kind, s) in &report.by_kind {
        match (&s.pearson_log_sigma, &s.pearson_ci) {
            (Some(p), Some(ci)) => {
                println!("{kind}: r = {:.3}, CI ({:.3}, {:.3})", p.r, ci.lo, ci.hi)
            }
            _ => println!("{kind}: {}", s.note.as_deref().unwrap_or("no statistics")),
        }
        for b in &s.bins {
            println!(
                "    log(1+sigma) {:.2}: drop {:6.2} +- {:.2} (n={})",
                b.center, b.mean_drop, b.std_error, b.n
            );
        }
    }
    Ok(())
}
