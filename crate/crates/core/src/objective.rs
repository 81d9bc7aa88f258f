//! Training objective `L_task(W_eff) + λ · Σ_layers Ω(φ)` and its analytic
//! gradients with respect to every adapter's `(φ, A, B)`.
//!
//! With `G = ∂L_task/∂W_eff` for one layer, `P_U = U Uᵀ`, `P_V = V Vᵀ`:
//!
//! ```text
//! ∂/∂φ_i = u_iᵀ G v_i + 2 λ w_i φ_i
//! ∂/∂B   = s (I − P_U) G Ãᵀ
//! ∂/∂A   = s B̃ᵀ G (I − P_V)
//! ```
//!
//! Without the residual projection the projectors drop out.

use std::collections::BTreeMap;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::adapter::{effective_weight, project_factors, Adapter};
use crate::cache::LayerCaches;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{self, Activations, Backbone, Batch};

/// How per-layer budgets combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    pub lambda_stab: f64,
    pub gamma: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            lambda_stab: 0.3,
            gamma: 1.0,
            reduction: Reduction::Sum,
        }
    }
}

impl StabilityConfig {
    pub fn new(lambda_stab: f64, gamma: f64) -> Self {
        Self {
            lambda_stab,
            gamma,
            reduction: Reduction::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_stab >= 0.0 && self.lambda_stab.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_stab must be >= 0, got {}",
                self.lambda_stab
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Multiplier on each layer's Ω given `layers` adapted layers.
    fn per_layer_lambda(&self, layers: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => self.lambda_stab,
            Reduction::Mean => self.lambda_stab / layers.max(1) as f64,
        }
    }
}

/// `w_i = σ_iᵞ / Σ_j σ_jᵞ`.
pub fn stability_weights(sigma: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if sigma.is_empty() {
        return Err(Error::Empty("spectrum".into()));
    }
    if let Some(s) = sigma.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::DegenerateSpectrum(format!("singular value {s}")));
    }
    if gamma == 0.0 {
        return Ok(vec![1.0 / sigma.len() as f64; sigma.len()]);
    }
    let powered: Vec<f64> = sigma.iter().map(|s| s.powf(gamma)).collect();
    let total: f64 = powered.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSpectrum(format!(
            "all-zero spectrum with gamma={gamma}"
        )));
    }
    Ok(powered.into_iter().map(|p| p / total).collect())
}

/// `Ω(φ) = Σ_i w_i φ_i²`.
pub fn omega(phi: &[f64], sigma: &[f64], gamma: f64) -> Result<f64> {
    if phi.len() != sigma.len() {
        return Err(Error::dim(format!(
            "phi has {} entries, sigma {}",
            phi.len(),
            sigma.len()
        )));
    }
    let w = stability_weights(sigma, gamma)?;
    Ok(w.iter().zip(phi).map(|(w, p)| w * p * p).sum())
}

/// Mean softmax cross-entropy of the network `weights` on `batch`.
pub fn task_loss(weights: &[&Matrix], batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("task loss over an empty batch".into()));
    }
    let acts = model::forward(weights, &batch.x)?;
    model::cross_entropy(&acts.logits, &batch.y)
}

/// Effective weights in layer order; layers without an adapter stay frozen.
pub fn effective_weights(
    backbone: &Backbone,
    adapter: &Adapter,
    caches: &LayerCaches,
) -> Result<Vec<Matrix>> {
    for id in adapter.layers.keys() {
        if !backbone.layers.iter().any(|l| &l.layer_id == id) {
            return Err(Error::IncompatibleBackbone(format!(
                "backbone lacks layer `{id}`"
            )));
        }
    }
    backbone
        .layers
        .iter()
        .map(|l| match adapter.layers.get(&l.layer_id) {
            Some(state) => {
                let cache = caches.get(&l.layer_id).ok_or_else(|| {
                    Error::IncompatibleBackbone(format!(
                        "no cache entry for layer `{}`",
                        l.layer_id
                    ))
                })?;
                effective_weight(state, cache, &adapter.config)
            }
            None => Ok(l.weight.clone()),
        })
        .collect()
}

/// `Σ_layers Ω(φ_layer)` (or the mean, per `stab.reduction`), unscaled by λ.
pub fn budget(adapter: &Adapter, caches: &LayerCaches, stab: &StabilityConfig) -> Result<f64> {
    let mut total = 0.0;
    for (id, st) in &adapter.layers {
        let cache = caches.get(id).ok_or_else(|| {
            Error::IncompatibleBackbone(format!("no cache entry for layer `{id}`"))
        })?;
        total += omega(&st.phi, &cache.sigma, stab.gamma)?;
    }
    Ok(match stab.reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / adapter.layers.len().max(1) as f64,
    })
}

/// `L_task + λ · Σ Ω`. With `λ = 0` the budget term is skipped entirely.
pub fn total_objective(
    backbone: &Backbone,
    adapter: &Adapter,
    caches: &LayerCaches,
    stab: &StabilityConfig,
    batch: &Batch,
) -> Result<f64> {
    let weights = effective_weights(backbone, adapter, caches)?;
    let refs: Vec<&Matrix> = weights.iter().collect();
    let loss = task_loss(&refs, batch)?;
    if stab.lambda_stab == 0.0 {
        return Ok(loss);
    }
    Ok(loss + stab.lambda_stab * budget(adapter, caches, stab)?)
}

/// State captured by [`forward`] and consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub loss: f64,
    pub omega: f64,
    pub objective: f64,
    weights: Vec<Matrix>,
    acts: Activations,
    fingerprint: u64,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        &self.acts.logits
    }
}

fn fingerprint(adapter: &Adapter, batch: &Batch) -> u64 {
    let mut h = fnv::FnvHasher::default();
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| h.write(&x.to_le_bytes()));
    for st in adapter.layers.values() {
        put(&st.phi);
        put(st.a.data());
        put(st.b.data());
    }
    put(batch.x.data());
    for y in &batch.y {
        h.write(&(*y as u64).to_le_bytes());
    }
    h.finish()
}

pub fn forward(
    backbone: &Backbone,
    adapter: &Adapter,
    caches: &LayerCaches,
    stab: &StabilityConfig,
    batch: &Batch,
) -> Result<ForwardPass> {
    let weights = effective_weights(backbone, adapter, caches)?;
    let refs: Vec<&Matrix> = weights.iter().collect();
    let acts = model::forward(&refs, &batch.x)?;
    let loss = model::cross_entropy(&acts.logits, &batch.y)?;
    let omega = budget(adapter, caches, stab)?;
    let objective = if stab.lambda_stab == 0.0 {
        loss
    } else {
        loss + stab.lambda_stab * omega
    };
    Ok(ForwardPass {
        loss,
        omega,
        objective,
        weights,
        acts,
        fingerprint: fingerprint(adapter, batch),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub d_phi: Vec<f64>,
    /// `r × n`
    pub d_a: Matrix,
    /// `m × r`
    pub d_b: Matrix,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.d_phi.iter().all(|x| x.is_finite()) && self.d_a.is_finite() && self.d_b.is_finite()
    }

    pub fn norm_sq(&self) -> f64 {
        self.d_phi.iter().map(|x| x * x).sum::<f64>()
            + self.d_a.frobenius_sq()
            + self.d_b.frobenius_sq()
    }
}

/// `X − Q(QᵀX)`.
fn complement_left(q: &Matrix, x: &Matrix) -> Result<Matrix> {
    x.sub(&q.matmul(&q.t_matmul(x)?)?)
}

/// `X − (XQ)Qᵀ`.
fn complement_right(x: &Matrix, q: &Matrix) -> Result<Matrix> {
    x.sub(&x.matmul(q)?.matmul_t(q)?)
}

/// Adapter gradients given `G = ∂L_task/∂W_eff` for each adapted layer.
pub fn adapter_gradients(
    adapter: &Adapter,
    caches: &LayerCaches,
    stab: &StabilityConfig,
    weight_grads: &BTreeMap<String, Matrix>,
) -> Result<BTreeMap<String, Gradients>> {
    let cfg = &adapter.config;
    let s = cfg.scale();
    let lambda = stab.per_layer_lambda(adapter.layers.len());
    let mut out = BTreeMap::new();
    for (id, st) in &adapter.layers {
        let cache = &caches[id];
        let g = &weight_grads[id];
        let d_phi = if cfg.trains_phi() {
            let gv = g.matmul(&cache.v)?; // m × k
            let w = stability_weights(&cache.sigma, stab.gamma)?;
            (0..cache.k)
                .map(|i| {
                    let data = dot(&cache.u.column(i), &gv.column(i));
                    if lambda == 0.0 {
                        data
                    } else {
                        data + 2.0 * lambda * w[i] * st.phi[i]
                    }
                })
                .collect()
        } else {
            vec![0.0; cache.k]
        };
        let (d_b, d_a) = if cfg.projects_residual() {
            let (bt, at) = project_factors(st, cache)?;
            let db = complement_left(&cache.u, &g.matmul_t(&at)?)?;
            let da = complement_right(&bt.t_matmul(g)?, &cache.v)?;
            (db.scale(s), da.scale(s))
        } else {
            (g.matmul_t(&st.a)?.scale(s), st.b.t_matmul(g)?.scale(s))
        };
        out.insert(id.clone(), Gradients { d_phi, d_a, d_b });
    }
    Ok(out)
}

/// Gradients of [`total_objective`] at the point captured by `fwd`.
pub fn backward(
    backbone: &Backbone,
    adapter: &Adapter,
    caches: &LayerCaches,
    stab: &StabilityConfig,
    batch: &Batch,
    fwd: &ForwardPass,
) -> Result<BTreeMap<String, Gradients>> {
    if fingerprint(adapter, batch) != fwd.fingerprint {
        return Err(Error::StaleForward(
            "adapter parameters or batch changed since the forward pass".into(),
        ));
    }
    let refs: Vec<&Matrix> = fwd.weights.iter().collect();
    let grads = model::weight_gradients(&refs, &fwd.acts, &batch.y)?;
    let by_id: BTreeMap<String, Matrix> = backbone
        .layers
        .iter()
        .zip(grads)
        .filter(|(l, _)| adapter.layers.contains_key(&l.layer_id))
        .map(|(l, g)| (l.layer_id.clone(), g))
        .collect();
    adapter_gradients(adapter, caches, stab, &by_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterConfig, Mode};
    use crate::cache::{build_cache, by_layer};
    use crate::rng::Stream;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn weight_examples() {
        assert_eq!(
            stability_weights(&[5.0, 3.0, 2.0, 1.0], 0.0).unwrap(),
            vec![0.25; 4]
        );
        let w = stability_weights(&[2.0, 1.0], 1.0).unwrap();
        assert!(close(w[0], 2.0 / 3.0, 1e-15) && close(w[1], 1.0 / 3.0, 1e-15));
        let w = stability_weights(&[3.0, 1.0], 2.0).unwrap();
        assert!(close(w[0], 0.9, 1e-15) && close(w[1], 0.1, 1e-15));
        assert!(matches!(
            stability_weights(&[0.0, 0.0], 1.0),
            Err(Error::DegenerateSpectrum(_))
        ));
    }

    #[test]
    fn omega_examples() {
        assert_eq!(omega(&[0.0, 0.0], &[3.0, 1.0], 2.0).unwrap(), 0.0);
        assert!(close(
            omega(&[1.0, 1.0], &[3.0, 1.0], 0.0).unwrap(),
            1.0,
            1e-15
        ));
        assert!(close(
            omega(&[0.1, 0.2], &[3.0, 1.0], 2.0).unwrap(),
            0.013,
            1e-15
        ));
        assert!(matches!(
            omega(&[1.0], &[3.0, 1.0], 2.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn omega_penalizes_top_direction_more() {
        let sigma = [4.0, 2.0, 1.0, 0.5];
        for gamma in [0.5, 1.0, 2.0] {
            let top = omega(&[1.0, 0.0, 0.0, 0.0], &sigma, gamma).unwrap();
            let bottom = omega(&[0.0, 0.0, 0.0, 1.0], &sigma, gamma).unwrap();
            assert!(top > bottom);
        }
    }

    fn setup(mode: Mode, seed: u64) -> (Backbone, LayerCaches, Adapter, Batch) {
        let mut s = Stream::new(seed);
        let w1 = Matrix::gaussian(6, 5, 0.6, &mut s);
        let w2 = Matrix::gaussian(3, 6, 0.6, &mut s);
        let bb = Backbone::new("t", vec![("l1".into(), w1), ("l2".into(), w2)]).unwrap();
        let caches = by_layer(build_cache(&bb.weights(), 2, seed).unwrap());
        let cfg = AdapterConfig::new(2, 2, mode, seed);
        let mut ad = Adapter::zeros(cfg, &caches);
        for st in ad.layers.values_mut() {
            if mode == Mode::HiP {
                st.phi = s.normals(2).iter().map(|x| 0.3 * x).collect();
            }
            st.a = Matrix::gaussian(st.a.rows(), st.a.cols(), 0.3, &mut s);
            st.b = Matrix::gaussian(st.b.rows(), st.b.cols(), 0.3, &mut s);
        }
        let batch = Batch::new(
            Matrix::gaussian(7, 5, 1.0, &mut s),
            vec![0, 1, 2, 1, 0, 2, 2],
        )
        .unwrap();
        (bb, caches, ad, batch)
    }

    #[test]
    fn lambda_zero_is_task_loss_bitwise() {
        let (bb, caches, ad, batch) = setup(Mode::HiP, 1);
        let w = effective_weights(&bb, &ad, &caches).unwrap();
        let refs: Vec<&Matrix> = w.iter().collect();
        let base = task_loss(&refs, &batch).unwrap();
        for gamma in [0.0, 1.0, 2.0] {
            let stab = StabilityConfig::new(0.0, gamma);
            assert_eq!(
                total_objective(&bb, &ad, &caches, &stab, &batch).unwrap(),
                base
            );
        }
    }

    #[test]
    fn objective_matches_direct_sum() {
        let (bb, caches, ad, batch) = setup(Mode::HiP, 2);
        let stab = StabilityConfig::new(0.3, 1.0);
        let mut expected = 0.0;
        for (id, st) in &ad.layers {
            let sig = &caches[id].sigma;
            let tot: f64 = sig.iter().sum();
            expected += st
                .phi
                .iter()
                .zip(sig)
                .map(|(p, s)| s / tot * p * p)
                .sum::<f64>();
        }
        let w = effective_weights(&bb, &ad, &caches).unwrap();
        let refs: Vec<&Matrix> = w.iter().collect();
        expected = task_loss(&refs, &batch).unwrap() + 0.3 * expected;
        let got = total_objective(&bb, &ad, &caches, &stab, &batch).unwrap();
        assert!(close(got, expected, 1e-12));
    }

    #[test]
    fn pure_regularizer_gradient() {
        let (_, caches, ad, _) = setup(Mode::HiP, 3);
        let stab = StabilityConfig::new(0.5, 1.0);
        let zeros: BTreeMap<String, Matrix> = caches
            .iter()
            .map(|(id, c)| (id.clone(), Matrix::zeros(c.rows(), c.cols())))
            .collect();
        let g = adapter_gradients(&ad, &caches, &stab, &zeros).unwrap();
        for (id, gr) in &g {
            let w = stability_weights(&caches[id].sigma, 1.0).unwrap();
            for (i, wi) in w.iter().enumerate() {
                assert!(close(
                    gr.d_phi[i],
                    2.0 * 0.5 * wi * ad.layers[id].phi[i],
                    1e-15
                ));
            }
            assert_eq!(gr.d_a.max_abs(), 0.0);
            assert_eq!(gr.d_b.max_abs(), 0.0);
        }
    }

    #[test]
    fn zero_batch_at_init_has_zero_gradients() {
        let (bb, caches, _, _) = setup(Mode::HiP, 4);
        let ad = Adapter::zeros(AdapterConfig::new(2, 2, Mode::HiP, 0), &caches);
        let batch = Batch::new(Matrix::zeros(4, 5), vec![0, 1, 2, 0]).unwrap();
        let stab = StabilityConfig::new(0.3, 1.0);
        let fwd = forward(&bb, &ad, &caches, &stab, &batch).unwrap();
        for gr in backward(&bb, &ad, &caches, &stab, &batch, &fwd)
            .unwrap()
            .values()
        {
            assert_eq!(gr.norm_sq(), 0.0);
        }
    }

    #[test]
    fn stale_forward_is_rejected() {
        let (bb, caches, mut ad, batch) = setup(Mode::HiP, 5);
        let stab = StabilityConfig::default();
        let fwd = forward(&bb, &ad, &caches, &stab, &batch).unwrap();
        ad.layers.get_mut("l1").unwrap().phi[0] += 1.0;
        assert!(matches!(
            backward(&bb, &ad, &caches, &stab, &batch, &fwd),
            Err(Error::StaleForward(_))
        ));
    }

    fn fd_check(mode: Mode, seed: u64) {
        let (bb, caches, ad, batch) = setup(mode, seed);
        let stab = StabilityConfig::new(0.7, 1.5);
        let fwd = forward(&bb, &ad, &caches, &stab, &batch).unwrap();
        let grads = backward(&bb, &ad, &caches, &stab, &batch, &fwd).unwrap();
        let h = 1e-6;
        let f = |a: &Adapter| total_objective(&bb, a, &caches, &stab, &batch).unwrap();
        for (id, g) in &grads {
            let check = |analytic: f64, perturb: &dyn Fn(&mut Adapter, f64)| {
                let mut p = ad.clone();
                perturb(&mut p, h);
                let mut q = ad.clone();
                perturb(&mut q, -h);
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "{mode:?} {id}: analytic {analytic} fd {fd}");
            };
            if mode == Mode::HiP {
                for i in 0..g.d_phi.len() {
                    check(g.d_phi[i], &|a, d| {
                        a.layers.get_mut(id).unwrap().phi[i] += d
                    });
                }
            }
            for i in 0..g.d_a.data().len() {
                check(g.d_a.data()[i], &|a, d| {
                    a.layers.get_mut(id).unwrap().a.data_mut()[i] += d
                });
            }
            for i in 0..g.d_b.data().len() {
                check(g.d_b.data()[i], &|a, d| {
                    a.layers.get_mut(id).unwrap().b.data_mut()[i] += d
                });
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(Mode::HiP, 10);
        fd_check(Mode::ProjLoRA, 11);
        fd_check(Mode::PlainLoRA, 12);
    }

    #[test]
    fn projected_factor_gradient_equals_raw_gradient() {
        // Differentiating at (B̃, Ã) gives the same projected gradient as at (B, A).
        let (bb, caches, ad, batch) = setup(Mode::HiP, 13);
        let stab = StabilityConfig::default();
        let mut proj = ad.clone();
        for (id, st) in proj.layers.iter_mut() {
            let (b, a) = project_factors(st, &caches[id]).unwrap();
            st.b = b;
            st.a = a;
        }
        let g_raw = backward(
            &bb,
            &ad,
            &caches,
            &stab,
            &batch,
            &forward(&bb, &ad, &caches, &stab, &batch).unwrap(),
        )
        .unwrap();
        let g_proj = backward(
            &bb,
            &proj,
            &caches,
            &stab,
            &batch,
            &forward(&bb, &proj, &caches, &stab, &batch).unwrap(),
        )
        .unwrap();
        for id in g_raw.keys() {
            assert!(g_raw[id].d_a.max_abs_diff(&g_proj[id].d_a).unwrap() < 1e-12);
            assert!(g_raw[id].d_b.max_abs_diff(&g_proj[id].d_b).unwrap() < 1e-12);
        }
    }
}
