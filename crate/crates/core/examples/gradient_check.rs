//! Analytic gradients of the regularized objective against central finite
//! differences on a small two-layer network.

use spectral_adapt::adapter::{Adapter, AdapterConfig, Mode};
use spectral_adapt::cache::{build_cache, by_layer};
use spectral_adapt::error::Result;
use spectral_adapt::linalg::Matrix;
use spectral_adapt::model::{Backbone, Batch};
use spectral_adapt::objective::{backward, forward, total_objective, StabilityConfig};
use spectral_adapt::rng::Stream;

fn main() -> Result<()> {
    let mut s = Stream::new(3);
    let bb = Backbone::new(
        "toy",
        vec![
            ("l1".into(), Matrix::gaussian(10, 6, 0.5, &mut s)),
            ("l2".into(), Matrix::gaussian(4, 10, 0.5, &mut s)),
        ],
    )?;
    let caches = by_layer(build_cache(&bb.weights(), 2, 3)?);
    let mut ad = Adapter::zeros(AdapterConfig::new(2, 2, Mode::HiP, 3), &caches);
    for st in ad.layers.values_mut() {
        st.phi = s.normals(2);
        st.a = Matrix::gaussian(st.a.rows(), st.a.cols(), 0.3, &mut s);
        st.b = Matrix::gaussian(st.b.rows(), st.b.cols(), 0.3, &mut s);
    }
    let batch = Batch::new(
        Matrix::gaussian(16, 6, 1.0, &mut s),
        (0..16).map(|_| s.below(4)).collect(),
    )?;
    let stab = StabilityConfig::new(0.3, 1.0);

    let fwd = forward(&bb, &ad, &caches, &stab, &batch)?;
    let grads = backward(&bb, &ad, &caches, &stab, &batch, &fwd)?;
    let h = 1e-6;
    for (id, g) in &grads {
        let mut worst = 0.0f64;
        for i in 0..g.d_phi.len() {
            let at = |d: f64| {
                let mut p = ad.clone();
                p.layers.get_mut(id).unwrap().phi[i] += d;
                total_objective(&bb, &p, &caches, &stab, &batch)
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            worst = worst.max((g.d_phi[i] - fd).abs() / fd.abs().max(1e-3));
        }
        println!(
            "{id}: d_phi = {:.5?}, max relative error vs FD {worst:.1e}",
            g.d_phi
        );
    }
    Ok(())
}
