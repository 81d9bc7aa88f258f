//! The two update channels of one layer: principal gains on the cached
//! singular directions and a low-rank residual kept off both sides of them.

use spectral_adapt::adapter::{
    delta_w, principal_delta, residual_delta, retract, AdapterConfig, AdapterState, Mode,
};
use spectral_adapt::cache::SvdCacheEntry;
use spectral_adapt::error::Result;
use spectral_adapt::linalg::Matrix;
use spectral_adapt::rng::Stream;

fn main() -> Result<()> {
    let mut s = Stream::new(1);
    let w = Matrix::gaussian(24, 16, 1.0, &mut s);
    let cache = SvdCacheEntry::from_weight("proj", &w, 4, 1)?;

    let cfg = AdapterConfig::new(4, 2, Mode::HiP, 1);
    let mut st = AdapterState::zeros(&cache, 2);
    st.phi = vec![0.5, -0.2, 0.1, 0.0];
    st.a = Matrix::gaussian(2, 16, 1.0, &mut s);
    st.b = Matrix::gaussian(24, 2, 1.0, &mut s);
    let st = retract(&st, &cache, &cfg)?;

    let principal = principal_delta(&st, &cache)?;
    let residual = residual_delta(&st, &cache, &cfg)?;
    let total = delta_w(&st, &cache, &cfg)?;
    println!("scale s = alpha/r = {}", cfg.scale());
    println!(
        "|U^T R|max = {:.1e}",
        cache.u.t_matmul(&residual)?.max_abs()
    );
    println!("|R V|max   = {:.1e}", residual.matmul(&cache.v)?.max_abs());
    println!(
        "|dW|^2 = {:.6}, |P|^2 + |R|^2 = {:.6}",
        total.frobenius_sq(),
        principal.frobenius_sq() + residual.frobenius_sq()
    );
    Ok(())
}
