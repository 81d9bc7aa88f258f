//! Factor a backbone once, save the cache, load it back and inspect it.

use spectral_adapt::bench::{make_world, WorldConfig};
use spectral_adapt::cache::{build_cache, load_cache, save_cache, CacheManifest};
use spectral_adapt::error::Result;

fn main() -> Result<()> {
    let world = make_world(&WorldConfig::default())?;
    let entries = build_cache(&world.backbone.weights(), 8, 0)?;
    let manifest = CacheManifest::describe(&world.backbone.id, &entries)?;

    let dir = std::env::temp_dir().join("spectral-adapt-cache-example");
    save_cache(&entries, &manifest, &dir)?;
    let (loaded, manifest) = load_cache(&dir)?;
    println!(
        "cache at {} (fingerprint {})",
        dir.display(),
        manifest.fingerprint()
    );

    for (entry, layer) in loaded.iter().zip(&world.backbone.layers) {
        let residual = entry.w_tilde.frobenius_norm() / layer.weight.frobenius_norm();
        println!(
            "{}: {}x{}, k={}, sigma[..3]={:.3?}, |W~|/|W|={residual:.3}, orthonormality {:.1e}",
            entry.layer_id,
            entry.rows(),
            entry.cols(),
            entry.k,
            &entry.sigma[..3],
            entry.orthonormality_error()
        );
    }
    Ok(())
}
