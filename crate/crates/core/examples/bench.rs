//! Full benchmark on the default world: HiP, plain LoRA and Proj-LoRA, plus
//! the HiP ablations. Prints Retain and MergeFail per method.

use spectral_adapt::bench::{ablation_methods, default_methods, run_bench, BenchConfig};

fn main() -> spectral_adapt::error::Result<()> {
    let mut methods = default_methods();
    methods.extend(ablation_methods().into_iter().skip(1));
    let cfg = BenchConfig {
        methods,
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg, false)?;
    println!(
        "{:<22} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "method", "retain", "gain", "phi_E", "fail_t2", "fail_t4"
    );
    for (name, m) in &report.methods {
        let fail = |k: &str| m.merges.get(k).map_or(f64::NAN, |s| s.merge_fail);
        println!(
            "{:<22} {:>8.3} {:>8.3} {:>8.4} {:>9.3} {:>9.3}",
            name,
            m.retain,
            m.in_domain_gain,
            m.phi_energy,
            fail("t2"),
            fail("t4")
        );
        for (task, s) in &m.per_task {
            println!("    {task}: {:.2} -> {:.2}", s.before, s.after);
        }
    }
    Ok(())
}
