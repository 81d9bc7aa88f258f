use std::collections::BTreeMap;

use proptest::prelude::*;
use spectral_adapt::adapter::{
    delta_w, residual_delta, retract, Adapter, AdapterConfig, AdapterState, Mode,
};
use spectral_adapt::bench::retain_metric;
use spectral_adapt::cache::{build_cache, by_layer, LayerCaches, SvdCacheEntry};
use spectral_adapt::linalg::{exact_svd_oracle, planted_spectrum, randomized_svd, Matrix};
use spectral_adapt::merge::{
    merge_addition, merge_addition_dense, merge_failed, merge_ties, MergeConfig, MergeRule,
};
use spectral_adapt::model::{Backbone, Batch};
use spectral_adapt::objective::{
    omega, stability_weights, task_loss, total_objective, StabilityConfig,
};
use spectral_adapt::probe::{intervene, InterventionKind, InterventionSpec};
use spectral_adapt::rng::Stream;
use spectral_adapt::trainer::{init_adapter, train, TrainConfig};

fn mode_strategy() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::HiP), Just(Mode::ProjLoRA), Just(Mode::PlainLoRA)]
}

fn random_state(cache: &SvdCacheEntry, r: usize, mode: Mode, s: &mut Stream) -> AdapterState {
    let mut st = AdapterState::zeros(cache, r);
    if mode == Mode::HiP {
        st.phi = s.normals(cache.k);
    }
    st.a = Matrix::gaussian(r, cache.cols(), 1.0, s);
    st.b = Matrix::gaussian(cache.rows(), r, 1.0, s);
    st
}

fn two_layer(seed: u64, n: usize, h: usize, m: usize, k: usize) -> (Backbone, LayerCaches) {
    let mut s = Stream::new(seed);
    let bb = Backbone::new(
        "p",
        vec![
            ("l1".into(), Matrix::gaussian(h, n, 0.5, &mut s)),
            ("l2".into(), Matrix::gaussian(m, h, 0.5, &mut s)),
        ],
    )
    .unwrap();
    let caches = by_layer(build_cache(&bb.weights(), k, seed).unwrap());
    (bb, caches)
}

fn random_adapter(caches: &LayerCaches, k: usize, r: usize, mode: Mode, seed: u64) -> Adapter {
    let mut s = Stream::new(seed ^ 0xada);
    let mut ad = Adapter::zeros(AdapterConfig::new(k, r, mode, seed), caches);
    for (id, st) in ad.layers.iter_mut() {
        *st = random_state(&caches[id], r, mode, &mut s);
    }
    ad
}

fn dense_projector_oracle(cache: &SvdCacheEntry, st: &AdapterState, scale: f64) -> Matrix {
    let pu = cache.u.matmul_t(&cache.u).unwrap();
    let pv = cache.v.matmul_t(&cache.v).unwrap();
    let left = Matrix::identity(cache.rows()).sub(&pu).unwrap();
    let right = Matrix::identity(cache.cols()).sub(&pv).unwrap();
    let ba = st.b.matmul(&st.a).unwrap().scale(scale);
    left.matmul(&ba).unwrap().matmul(&right).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_factors_are_orthonormal(seed in any::<u64>(), m in 2usize..32, n in 2usize..32, k in 1usize..8) {
        let k = k.min(m.min(n));
        let w = Matrix::gaussian(m, n, 1.0, &mut Stream::new(seed));
        let svd = randomized_svd(&w, k, 2, 8, seed).unwrap();
        prop_assert!(svd.orthonormality_error() <= 1e-10);
        let exact = exact_svd_oracle(&w).unwrap();
        prop_assert!(exact.orthonormality_error() <= 1e-10);
    }

    #[test]
    fn randomized_svd_is_bitwise_deterministic(seed in any::<u64>(), m in 2usize..24, n in 2usize..24) {
        let w = Matrix::gaussian(m, n, 1.0, &mut Stream::new(seed));
        let k = 1 + seed as usize % m.min(n);
        let a = randomized_svd(&w, k, 2, 8, seed).unwrap();
        let b = randomized_svd(&w, k, 2, 8, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn randomized_error_near_optimal_on_geometric_spectra(
        seed in any::<u64>(), m in 8usize..40, n in 8usize..40, k in 1usize..6, rho in 0.5f64..0.85,
    ) {
        let sigma: Vec<f64> = (0..m.min(n)).map(|i| rho.powi(i as i32)).collect();
        let w = planted_spectrum(m, n, &sigma, &mut Stream::new(seed)).unwrap();
        let svd = randomized_svd(&w, k, 2, 8, seed).unwrap();
        let err = w.sub(&svd.reconstruct()).unwrap().frobenius_norm();
        let best = sigma[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(err <= 1.05 * best + 1e-12, "error {} vs optimal {}", err, best);
    }

    #[test]
    fn cache_build_is_idempotent(seed in any::<u64>(), k in 1usize..5) {
        let mut s = Stream::new(seed);
        let w: BTreeMap<String, Matrix> = [
            ("a".to_string(), Matrix::gaussian(9, 7, 1.0, &mut s)),
            ("b".to_string(), Matrix::gaussian(6, 9, 1.0, &mut s)),
        ].into();
        prop_assert_eq!(build_cache(&w, k, seed).unwrap(), build_cache(&w, k, seed).unwrap());
    }

    #[test]
    fn retraction_gives_two_sided_orthogonality(
        seed in any::<u64>(), m in 2usize..32, n in 2usize..32, k in 1usize..8, r in 1usize..4,
        projected in prop_oneof![Just(Mode::HiP), Just(Mode::ProjLoRA)],
    ) {
        let k = k.min(m.min(n) - 1).max(1);
        prop_assume!(k < m.min(n));
        let mut s = Stream::new(seed);
        let w = Matrix::gaussian(m, n, 1.0, &mut s);
        let cache = SvdCacheEntry::from_weight("w", &w, k, seed).unwrap();
        let cfg = AdapterConfig::new(k, r, projected, seed);
        let st = retract(&random_state(&cache, r, projected, &mut s), &cache, &cfg).unwrap();
        let res = residual_delta(&st, &cache, &cfg).unwrap();
        prop_assert!(cache.u.t_matmul(&res).unwrap().max_abs() <= 1e-10);
        prop_assert!(res.matmul(&cache.v).unwrap().max_abs() <= 1e-10);

        let total = delta_w(&st, &cache, &cfg).unwrap();
        let principal = total.sub(&res).unwrap();
        let lhs = total.frobenius_sq();
        let gap = (lhs - principal.frobenius_sq() - res.frobenius_sq()).abs();
        prop_assert!(gap <= 1e-8 * lhs.max(1e-300));
    }

    #[test]
    fn projected_factors_match_dense_projector(
        seed in any::<u64>(), m in 2usize..32, n in 2usize..32, k in 1usize..8, r in 1usize..4,
    ) {
        let k = k.min(m.min(n));
        let mut s = Stream::new(seed);
        let w = Matrix::gaussian(m, n, 1.0, &mut s);
        let cache = SvdCacheEntry::from_weight("w", &w, k, seed).unwrap();
        let cfg = AdapterConfig::new(k, r, Mode::ProjLoRA, seed);
        let st = random_state(&cache, r, Mode::ProjLoRA, &mut s);
        let fast = residual_delta(&st, &cache, &cfg).unwrap();
        let dense = dense_projector_oracle(&cache, &st, cfg.scale());
        prop_assert!(fast.max_abs_diff(&dense).unwrap() <= 1e-10);
    }

    #[test]
    fn plain_lora_is_scaled_ba(seed in any::<u64>(), m in 2usize..16, n in 2usize..16, r in 1usize..4, alpha in 0.5f64..16.0) {
        let mut s = Stream::new(seed);
        let w = Matrix::gaussian(m, n, 1.0, &mut s);
        let cache = SvdCacheEntry::from_weight("w", &w, 1, seed).unwrap();
        let mut cfg = AdapterConfig::new(1, r, Mode::PlainLoRA, seed);
        cfg.alpha = alpha;
        let st = random_state(&cache, r, Mode::PlainLoRA, &mut s);
        let expect = st.b.matmul(&st.a).unwrap().scale(alpha / r as f64);
        prop_assert_eq!(delta_w(&st, &cache, &cfg).unwrap(), expect);
    }

    #[test]
    fn stability_weights_sum_to_one(sigma in prop::collection::vec(0.01f64..100.0, 1..12), gamma in 0.0f64..3.0) {
        let w = stability_weights(&sigma, gamma).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn budget_protects_large_directions(
        mut sigma in prop::collection::vec(0.01f64..100.0, 2..10), gamma in 0.01f64..3.0, norm in 0.01f64..5.0,
    ) {
        sigma.sort_by(|a, b| b.total_cmp(a));
        sigma.dedup();
        prop_assume!(sigma.len() >= 2);
        let mut top = vec![0.0; sigma.len()];
        top[0] = norm;
        let mut bottom = vec![0.0; sigma.len()];
        *bottom.last_mut().unwrap() = norm;
        prop_assert!(omega(&top, &sigma, gamma).unwrap() > omega(&bottom, &sigma, gamma).unwrap());
    }

    #[test]
    fn zero_lambda_objective_is_task_loss(seed in any::<u64>(), gamma in 0.0f64..3.0, mode in mode_strategy()) {
        let (bb, caches) = two_layer(seed, 6, 8, 4, 2);
        let ad = random_adapter(&caches, 2, 2, mode, seed);
        let mut s = Stream::new(seed ^ 1);
        let batch = Batch::new(Matrix::gaussian(10, 6, 1.0, &mut s), (0..10).map(|_| s.below(4)).collect()).unwrap();
        let stab = StabilityConfig::new(0.0, gamma);
        let weights = spectral_adapt::objective::effective_weights(&bb, &ad, &caches).unwrap();
        let refs: Vec<&Matrix> = weights.iter().collect();
        let plain = task_loss(&refs, &batch).unwrap();
        prop_assert_eq!(total_objective(&bb, &ad, &caches, &stab, &batch).unwrap().to_bits(), plain.to_bits());
    }

    #[test]
    fn addition_merge_is_order_free(seed in any::<u64>(), t in 2usize..5, k in 1usize..4) {
        let (_, caches) = two_layer(seed, 8, 10, 6, k);
        let modes = [Mode::HiP, Mode::ProjLoRA, Mode::PlainLoRA];
        let ads: Vec<Adapter> = (0..t)
            .map(|i| random_adapter(&caches, k, 1 + i % 3, modes[(seed as usize + i) % 3], seed.wrapping_add(i as u64)))
            .collect();
        let forward: Vec<&Adapter> = ads.iter().collect();
        let reversed: Vec<&Adapter> = ads.iter().rev().collect();
        let rotated: Vec<&Adapter> = ads.iter().cycle().skip(1).take(t).collect();
        let a = merge_addition(&forward, &caches).unwrap();
        for other in [&reversed, &rotated] {
            let b = merge_addition(other, &caches).unwrap();
            for (id, w) in &a {
                prop_assert!(w.max_abs_diff(&b[id]).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn phi_sum_route_matches_dense(seed in any::<u64>(), t in 1usize..5, m in 4usize..32, n in 4usize..32, k in 1usize..8) {
        let k = k.min(m.min(n) / 2).max(1);
        let mut s = Stream::new(seed);
        let w: BTreeMap<String, Matrix> = [("w".to_string(), Matrix::gaussian(m, n, 1.0, &mut s))].into();
        let caches = by_layer(build_cache(&w, k, seed).unwrap());
        let ads: Vec<Adapter> = (0..t)
            .map(|i| random_adapter(&caches, k, 1 + i % 4, [Mode::HiP, Mode::ProjLoRA, Mode::PlainLoRA][i % 3], seed ^ i as u64))
            .collect();
        let refs: Vec<&Adapter> = ads.iter().collect();
        let fast = merge_addition(&refs, &caches).unwrap();
        let dense = merge_addition_dense(&w, &refs, &caches).unwrap();
        prop_assert!(fast["w"].max_abs_diff(&dense["w"]).unwrap() <= 1e-10);
    }

    #[test]
    fn ties_of_one_full_vector_is_addition(seed in any::<u64>(), mode in mode_strategy()) {
        let (_, caches) = two_layer(seed, 7, 9, 5, 2);
        let ad = random_adapter(&caches, 2, 2, mode, seed);
        let cfg = MergeConfig { rule: MergeRule::Ties, ties_keep_frac: 1.0, ties_lambda: 1.0, ..MergeConfig::default() };
        let ties = merge_ties(&[&ad], &caches, &cfg).unwrap();
        let add = merge_addition(&[&ad], &caches).unwrap();
        for (id, w) in &ties {
            prop_assert!(w.max_abs_diff(&add[id]).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn merge_fail_is_monotone_in_tau(
        before in prop::collection::vec(1.0f64..100.0, 1..6),
        ratios in prop::collection::vec(0.5f64..1.2, 6),
        tau_lo in 0.05f64..1.0, step in 0.0f64..0.5,
    ) {
        let tau_hi = (tau_lo + step).min(1.0);
        let b: BTreeMap<String, f64> = before.iter().enumerate().map(|(i, v)| (format!("t{i}"), *v)).collect();
        let a: BTreeMap<String, f64> = before.iter().enumerate().map(|(i, v)| (format!("t{i}"), v * ratios[i])).collect();
        let lo = merge_failed(&b, &a, tau_lo).unwrap();
        let hi = merge_failed(&b, &a, tau_hi).unwrap();
        prop_assert!(!lo || hi);
    }

    #[test]
    fn retain_of_identity_is_zero(scores in prop::collection::vec(0.0f64..100.0, 1..8)) {
        let s: BTreeMap<String, f64> = scores.iter().enumerate().map(|(i, v)| (format!("b{i}"), *v)).collect();
        prop_assert_eq!(retain_metric(&s, &s, None).unwrap(), 0.0);
    }

    #[test]
    fn zero_is_idempotent_and_flip_an_involution(seed in any::<u64>(), m in 2usize..20, n in 2usize..20, pick in 0usize..8) {
        let mut s = Stream::new(seed);
        let w = Matrix::gaussian(m, n, 1.0, &mut s);
        let k = m.min(n);
        let cache = SvdCacheEntry::from_weight("w", &w, k, seed).unwrap();
        let i = 1 + pick % k;
        let zero = InterventionSpec::new("w", i, InterventionKind::Zero, seed);
        let flip = InterventionSpec::new("w", i, InterventionKind::Flip, seed);
        let once = intervene(&w, &cache, &zero).unwrap();
        prop_assert!(intervene(&once, &cache, &zero).unwrap().max_abs_diff(&once).unwrap() <= 1e-12);
        let back = intervene(&intervene(&w, &cache, &flip).unwrap(), &cache, &flip).unwrap();
        prop_assert!(back.max_abs_diff(&w).unwrap() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_keeps_invariants_and_sigma(
        seed in any::<u64>(), projected in prop_oneof![Just(Mode::HiP), Just(Mode::ProjLoRA)],
    ) {
        let (bb, caches) = two_layer(seed, 8, 12, 4, 3);
        let before = caches.clone();
        let mut s = Stream::new(seed ^ 2);
        let batch = Batch::new(Matrix::gaussian(32, 8, 1.0, &mut s), (0..32).map(|_| s.below(4)).collect()).unwrap();
        let cfg = TrainConfig { steps: 200, lr: 1e-2, batch_size: 0, gaussian_init: true, seed, ..TrainConfig::default() };
        let acfg = AdapterConfig::new(3, 2, projected, seed);
        let ad = init_adapter(&acfg, &caches, &cfg).unwrap();
        let (trained, trace) = train(ad, &bb, &caches, &batch, &cfg, &StabilityConfig::new(0.1, 1.0)).unwrap();
        prop_assert_eq!(&caches, &before);
        for (id, st) in &trained.layers {
            let res = residual_delta(st, &caches[id], &trained.config).unwrap();
            prop_assert!(caches[id].u.t_matmul(&res).unwrap().max_abs() <= 1e-10);
            prop_assert!(res.matmul(&caches[id].v).unwrap().max_abs() <= 1e-10);
        }
        let n = trace.len().min(100);
        let head = trace[..n].iter().map(|e| e.loss).sum::<f64>() / n as f64;
        let tail = trace[trace.len() - n..].iter().map(|e| e.loss).sum::<f64>() / n as f64;
        prop_assert!(tail <= head, "trailing loss {} above leading {}", tail, head);
    }
}
