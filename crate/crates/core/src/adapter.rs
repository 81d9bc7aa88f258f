//! The two-channel update.
//!
//! For a cached layer `W ≈ U diag(σ) Vᵀ + W̃` an adapter holds principal
//! deviations `φ ∈ R^k` and LoRA factors `B (m×r)`, `A (r×n)`:
//!
//! ```text
//! ΔW = U diag(φ) Vᵀ + s · B̃ Ã,    B̃ = (I − U Uᵀ) B,   Ã = A (I − V Vᵀ),   s = α / r
//! ```
//!
//! `PlainLoRA` drops `φ` and the projection (`ΔW = s·BA`); `ProjLoRA` keeps the
//! projection but freezes `φ = 0`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{fnv1a, LayerCaches, SvdCacheEntry};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Stream;

pub const ADAPTER_FILE: &str = "adapter.json";
const MAGIC: &[u8; 4] = b"HIPA";
const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
pub const FORMAT_VERSION: &str = "1.0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "hip")]
    HiP,
    #[serde(rename = "lora")]
    PlainLoRA,
    #[serde(rename = "projlora")]
    ProjLoRA,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::HiP => "hip",
            Mode::PlainLoRA => "lora",
            Mode::ProjLoRA => "projlora",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hip" => Ok(Mode::HiP),
            "lora" => Ok(Mode::PlainLoRA),
            "projlora" => Ok(Mode::ProjLoRA),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Requested principal size; each layer uses its cache entry's rank.
    pub k: usize,
    pub r: usize,
    pub alpha: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Cleared by the "w/o residual projection" ablation.
    #[serde(default = "default_true")]
    pub residual_projection: bool,
}

impl AdapterConfig {
    /// Config with the conventional `α = 2r`.
    pub fn new(k: usize, r: usize, mode: Mode, seed: u64) -> Self {
        Self {
            k,
            r,
            alpha: 2.0 * r as f64,
            mode,
            seed,
            residual_projection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("residual rank r must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("principal size k must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Residual-channel scale `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    /// Whether `φ` is a trainable parameter.
    pub fn trains_phi(&self) -> bool {
        self.mode == Mode::HiP
    }

    /// Whether the residual factors are confined to the two-sided complement.
    pub fn projects_residual(&self) -> bool {
        self.mode != Mode::PlainLoRA && self.residual_projection
    }
}

/// Per-layer adapter parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub layer_id: String,
    pub phi: Vec<f64>,
    /// `r × n`
    pub a: Matrix,
    /// `m × r`
    pub b: Matrix,
}

impl AdapterState {
    /// `φ = 0`, `A = 0`, `B = 0`: the effective weight equals the frozen one.
    pub fn zeros(cache: &SvdCacheEntry, r: usize) -> Self {
        Self {
            layer_id: cache.layer_id.clone(),
            phi: vec![0.0; cache.k],
            a: Matrix::zeros(r, cache.cols()),
            b: Matrix::zeros(cache.rows(), r),
        }
    }

    /// `φ = 0`, `A = 0`, `B ~ N(0, 1/m)`. `BA = 0`, so the effective weight is
    /// still the frozen one, but gradients reach both factors.
    pub fn gaussian_b(cache: &SvdCacheEntry, r: usize, stream: &mut Stream) -> Self {
        let mut s = Self::zeros(cache, r);
        let std = 1.0 / (cache.rows() as f64).sqrt();
        s.b = Matrix::gaussian(cache.rows(), r, std, stream);
        s
    }

    pub fn r(&self) -> usize {
        self.a.rows()
    }

    /// Check that the state fits the cache entry.
    pub fn check(&self, cache: &SvdCacheEntry) -> Result<()> {
        if self.layer_id != cache.layer_id {
            return Err(Error::IncompatibleBackbone(format!(
                "adapter for layer `{}` applied to cache layer `{}`",
                self.layer_id, cache.layer_id
            )));
        }
        let r = self.a.rows();
        if self.phi.len() != cache.k
            || self.a.cols() != cache.cols()
            || self.b.shape() != (cache.rows(), r)
        {
            return Err(Error::dim(format!(
                "layer `{}`: phi {}, A {:?}, B {:?} do not fit a {}x{} rank-{} cache",
                self.layer_id,
                self.phi.len(),
                self.a.shape(),
                self.b.shape(),
                cache.rows(),
                cache.cols(),
                cache.k
            )));
        }
        Ok(())
    }

    pub fn phi_energy(&self) -> f64 {
        self.phi.iter().map(|x| x * x).sum()
    }

    fn all_finite(&self) -> bool {
        self.phi.iter().all(|x| x.is_finite()) && self.a.is_finite() && self.b.is_finite()
    }
}

/// `B̃ = B − U(UᵀB)` and `Ã = A − (AV)Vᵀ`. Cost `O((m+n)·k·r)`; the dense
/// product `BA` is never formed.
pub fn project_factors(state: &AdapterState, cache: &SvdCacheEntry) -> Result<(Matrix, Matrix)> {
    state.check(cache)?;
    let utb = cache.u.t_matmul(&state.b)?; // k × r
    let b_tilde = state.b.sub(&cache.u.matmul(&utb)?)?;
    let av = state.a.matmul(&cache.v)?; // r × k
    let a_tilde = state.a.sub(&av.matmul_t(&cache.v)?)?;
    Ok((b_tilde, a_tilde))
}

/// `U diag(φ) Vᵀ`.
pub fn principal_delta(state: &AdapterState, cache: &SvdCacheEntry) -> Result<Matrix> {
    state.check(cache)?;
    cache.principal_with_gains(&state.phi)
}

/// The residual channel including its scale: `s·B̃Ã` (or `s·BA` without projection).
pub fn residual_delta(
    state: &AdapterState,
    cache: &SvdCacheEntry,
    config: &AdapterConfig,
) -> Result<Matrix> {
    state.check(cache)?;
    let (b, a) = if config.projects_residual() {
        project_factors(state, cache)?
    } else {
        (state.b.clone(), state.a.clone())
    };
    Ok(b.matmul(&a)?.scale(config.scale()))
}

fn check_mode(state: &AdapterState, config: &AdapterConfig) -> Result<()> {
    if !config.trains_phi() && state.phi.iter().any(|x| *x != 0.0) {
        return Err(Error::Config(format!(
            "layer `{}`: {} mode has no principal channel but phi is nonzero",
            state.layer_id, config.mode
        )));
    }
    Ok(())
}

/// Full update `ΔW` for the configured mode.
pub fn delta_w(
    state: &AdapterState,
    cache: &SvdCacheEntry,
    config: &AdapterConfig,
) -> Result<Matrix> {
    check_mode(state, config)?;
    let mut dw = residual_delta(state, cache, config)?;
    if config.trains_phi() {
        dw.add_assign(&principal_delta(state, cache)?)?;
    }
    Ok(dw)
}

/// `W_eff = W̃ + U diag(σ + φ) Vᵀ + ΔW_res`, assembled from the cache.
pub fn effective_weight(
    state: &AdapterState,
    cache: &SvdCacheEntry,
    config: &AdapterConfig,
) -> Result<Matrix> {
    check_mode(state, config)?;
    let theta: Vec<f64> = cache
        .sigma
        .iter()
        .zip(&state.phi)
        .map(|(s, p)| s + p)
        .collect();
    let mut w = cache.w_tilde.add(&cache.principal_with_gains(&theta)?)?;
    w.add_assign(&residual_delta(state, cache, config)?)?;
    Ok(w)
}

/// `W_eff = W₀ + ΔW`, the additive assembly form.
pub fn effective_weight_additive(
    w0: &Matrix,
    state: &AdapterState,
    cache: &SvdCacheEntry,
    config: &AdapterConfig,
) -> Result<Matrix> {
    w0.add(&delta_w(state, cache, config)?)
}

/// Replace `(B, A)` by their projections onto the two-sided complement.
pub fn retract(
    state: &AdapterState,
    cache: &SvdCacheEntry,
    config: &AdapterConfig,
) -> Result<AdapterState> {
    if config.mode == Mode::PlainLoRA {
        return Err(Error::Config(
            "plain LoRA adapters are never retracted".into(),
        ));
    }
    let (b, a) = project_factors(state, cache)?;
    Ok(AdapterState {
        layer_id: state.layer_id.clone(),
        phi: state.phi.clone(),
        a,
        b,
    })
}

/// Largest of `‖UᵀB‖_max` and `‖AV‖_max`.
pub fn complement_violation(state: &AdapterState, cache: &SvdCacheEntry) -> Result<f64> {
    state.check(cache)?;
    let ub = cache.u.t_matmul(&state.b)?.max_abs();
    let av = state.a.matmul(&cache.v)?.max_abs();
    Ok(ub.max(av))
}

/// A multi-layer adapter tied to one cache.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub layers: BTreeMap<String, AdapterState>,
    /// Fingerprint of the cache the adapter was trained against.
    pub cache_fingerprint: String,
}

impl Adapter {
    pub fn zeros(config: AdapterConfig, caches: &LayerCaches) -> Self {
        let layers = caches
            .iter()
            .map(|(id, c)| (id.clone(), AdapterState::zeros(c, config.r)))
            .collect();
        Self {
            config,
            layers,
            cache_fingerprint: crate::cache::fingerprint(caches),
        }
    }

    /// Reject use against a different cache.
    pub fn check_against(&self, caches: &LayerCaches) -> Result<()> {
        let fp = crate::cache::fingerprint(caches);
        if fp != self.cache_fingerprint {
            return Err(Error::IncompatibleBackbone(format!(
                "adapter trained on cache {} but cache {} supplied",
                self.cache_fingerprint, fp
            )));
        }
        for (id, state) in &self.layers {
            let cache = caches.get(id).ok_or_else(|| {
                Error::IncompatibleBackbone(format!("cache lacks adapted layer `{id}`"))
            })?;
            state.check(cache)?;
        }
        Ok(())
    }

    pub fn delta_w(&self, caches: &LayerCaches) -> Result<BTreeMap<String, Matrix>> {
        self.layers
            .iter()
            .map(|(id, st)| {
                let cache = caches
                    .get(id)
                    .ok_or_else(|| Error::IncompatibleBackbone(format!("missing layer `{id}`")))?;
                Ok((id.clone(), delta_w(st, cache, &self.config)?))
            })
            .collect()
    }

    pub fn phi_energy(&self) -> f64 {
        self.layers.values().map(AdapterState::phi_energy).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub layer_id: String,
    pub k: usize,
    pub r: usize,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub checksum: String,
}

/// Contents of `adapter.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub format_version: String,
    pub mode: Mode,
    pub seed: u64,
    pub config: AdapterConfig,
    pub cache_fingerprint: String,
    pub layers: Vec<LayerMeta>,
}

fn state_payload(state: &AdapterState) -> Vec<u8> {
    let mut out = Vec::new();
    for x in state.phi.iter().chain(state.a.data()).chain(state.b.data()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn state_blob(state: &AdapterState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let dims = [
        BLOB_VERSION,
        state.phi.len() as u32,
        state.r() as u32,
        state.b.rows() as u32,
        state.a.cols() as u32,
    ];
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&state_payload(state));
    out
}

fn state_from_blob(layer_id: &str, bytes: &[u8]) -> Result<AdapterState> {
    let corrupt = |why: &str| Error::CorruptAdapter(format!("layer `{layer_id}`: {why}"));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("bad header"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != BLOB_VERSION as usize {
        return Err(Error::Version {
            found: word(0).to_string(),
            expected: BLOB_VERSION.to_string(),
        });
    }
    let (k, r, m, n) = (word(1), word(2), word(3), word(4));
    let expected = HEADER_LEN + 8 * (k + r * n + m * r);
    if r == 0 || m == 0 || n == 0 || bytes.len() != expected {
        return Err(corrupt(&format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |len: usize| -> Vec<f64> { floats.by_ref().take(len).collect() };
    let phi = take(k);
    let a = Matrix::new(r, n, take(r * n)).map_err(|e| corrupt(&e.to_string()))?;
    let b = Matrix::new(m, r, take(m * r)).map_err(|e| corrupt(&e.to_string()))?;
    Ok(AdapterState {
        layer_id: layer_id.to_string(),
        phi,
        a,
        b,
    })
}

/// Write `adapter.json` and one `HIPA` blob per layer into `dir`.
pub fn save_adapter(adapter: &Adapter, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for (id, state) in &adapter.layers {
        if !state.all_finite() {
            return Err(Error::NonFinite(format!("adapter layer `{id}`")));
        }
        let file = format!("{id}.hipa");
        let path = dir.join(&file);
        fs::write(&path, state_blob(state)).map_err(|e| Error::io(&path, e))?;
        layers.push(LayerMeta {
            layer_id: id.clone(),
            k: state.phi.len(),
            r: state.r(),
            rows: state.b.rows(),
            cols: state.a.cols(),
            file,
            checksum: format!("{:016x}", fnv1a(&state_payload(state))),
        });
    }
    let meta = AdapterMeta {
        format_version: FORMAT_VERSION.to_string(),
        mode: adapter.config.mode,
        seed: adapter.config.seed,
        config: adapter.config.clone(),
        cache_fingerprint: adapter.cache_fingerprint.clone(),
        layers,
    };
    let path = dir.join(ADAPTER_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_adapter(dir: &Path) -> Result<Adapter> {
    let path = dir.join(ADAPTER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: AdapterMeta = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptAdapter(format!("{}: {e}", path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let mut layers = BTreeMap::new();
    for lm in &meta.layers {
        let path = dir.join(&lm.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state = state_from_blob(&lm.layer_id, &bytes)?;
        if format!("{:016x}", fnv1a(&state_payload(&state))) != lm.checksum {
            return Err(Error::CorruptAdapter(format!(
                "layer `{}`: checksum mismatch",
                lm.layer_id
            )));
        }
        layers.insert(lm.layer_id.clone(), state);
    }
    Ok(Adapter {
        config: meta.config,
        layers,
        cache_fingerprint: meta.cache_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthonormal;

    /// Cache entry for `W = U diag(σ) Vᵀ + noise` with random orthonormal factors.
    fn random_cache(m: usize, n: usize, k: usize, seed: u64) -> SvdCacheEntry {
        let mut s = Stream::new(seed);
        let w = Matrix::gaussian(m, n, 1.0, &mut s);
        SvdCacheEntry::from_weight("layer0", &w, k, seed).unwrap()
    }

    fn random_state(cache: &SvdCacheEntry, r: usize, seed: u64) -> AdapterState {
        let mut s = Stream::new(seed);
        AdapterState {
            layer_id: cache.layer_id.clone(),
            phi: s.normals(cache.k),
            a: Matrix::gaussian(r, cache.cols(), 1.0, &mut s),
            b: Matrix::gaussian(cache.rows(), r, 1.0, &mut s),
        }
    }

    fn dense_projector(q: &Matrix) -> Matrix {
        let n = q.rows();
        Matrix::identity(n).sub(&q.matmul_t(q).unwrap()).unwrap()
    }

    #[test]
    fn projection_annihilates_and_fixes() {
        let cache = random_cache(6, 5, 2, 1);
        // B inside span(U): columns are combinations of U's columns.
        let coeffs = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let mut st = AdapterState::zeros(&cache, 2);
        st.b = cache.u.matmul(&coeffs).unwrap();
        let (bt, _) = project_factors(&st, &cache).unwrap();
        assert!(bt.max_abs() < 1e-12);

        // B orthogonal to U is a fixed point.
        let mut s = Stream::new(5);
        let g = Matrix::gaussian(6, 2, 1.0, &mut s);
        st.b = dense_projector(&cache.u).matmul(&g).unwrap();
        let (bt, _) = project_factors(&st, &cache).unwrap();
        assert!(bt.max_abs_diff(&st.b).unwrap() < 1e-12);
    }

    #[test]
    fn projection_matches_dense_projector() {
        let mut s = Stream::new(17);
        let u = random_orthonormal(6, 2, &mut s).unwrap();
        let mut cache = random_cache(6, 4, 2, 3);
        cache.u = u;
        let st = random_state(&cache, 2, 8);
        let (bt, at) = project_factors(&st, &cache).unwrap();
        let dense_b = dense_projector(&cache.u).matmul(&st.b).unwrap();
        let dense_a = st.a.matmul(&dense_projector(&cache.v)).unwrap();
        assert!(bt.max_abs_diff(&dense_b).unwrap() < 1e-12);
        assert!(at.max_abs_diff(&dense_a).unwrap() < 1e-12);
        assert!(cache.u.t_matmul(&bt).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_state_has_zero_delta_and_pristine_weight() {
        let cache = random_cache(7, 5, 3, 2);
        let cfg = AdapterConfig::new(3, 2, Mode::HiP, 0);
        let st = AdapterState::zeros(&cache, 2);
        assert_eq!(delta_w(&st, &cache, &cfg).unwrap().max_abs(), 0.0);
        let w0 = cache.reconstruct();
        let weff = effective_weight(&st, &cache, &cfg).unwrap();
        assert!(weff.max_abs_diff(&w0).unwrap() < 1e-12);
    }

    #[test]
    fn single_direction_edit() {
        let cache = random_cache(5, 5, 3, 4);
        let cfg = AdapterConfig::new(3, 1, Mode::HiP, 0);
        let mut st = AdapterState::zeros(&cache, 1);
        st.phi[0] = 1.0;
        let dw = delta_w(&st, &cache, &cfg).unwrap();
        let outer = Matrix::from_fn(5, 5, |i, j| cache.u.get(i, 0) * cache.v.get(j, 0));
        assert!(dw.max_abs_diff(&outer).unwrap() < 1e-14);
    }

    #[test]
    fn residual_part_is_two_sided_orthogonal() {
        let cache = random_cache(8, 6, 2, 6);
        let cfg = AdapterConfig::new(2, 2, Mode::HiP, 0);
        let st = random_state(&cache, 2, 7);
        let res = residual_delta(&st, &cache, &cfg).unwrap();
        assert!(cache.u.t_matmul(&res).unwrap().max_abs() < 1e-12);
        assert!(res.matmul(&cache.v).unwrap().max_abs() < 1e-12);
        let dense = dense_projector(&cache.u)
            .matmul(&st.b.matmul(&st.a).unwrap().scale(cfg.scale()))
            .unwrap()
            .matmul(&dense_projector(&cache.v))
            .unwrap();
        assert!(res.max_abs_diff(&dense).unwrap() < 1e-12);
    }

    #[test]
    fn assembly_forms_agree() {
        let cache = random_cache(9, 7, 3, 10);
        let cfg = AdapterConfig::new(3, 2, Mode::HiP, 0);
        let st = random_state(&cache, 2, 11);
        let w0 = cache.reconstruct();
        let a = effective_weight(&st, &cache, &cfg).unwrap();
        let b = effective_weight_additive(&w0, &st, &cache, &cfg).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn full_cancellation() {
        let cache = random_cache(4, 4, 4, 12);
        let cfg = AdapterConfig::new(4, 1, Mode::HiP, 0);
        let mut st = AdapterState::zeros(&cache, 1);
        st.phi = cache.sigma.iter().map(|s| -s).collect();
        let w = effective_weight(&st, &cache, &cfg).unwrap();
        assert!(w.max_abs() < 1e-12);
    }

    #[test]
    fn retraction_is_idempotent_and_annihilates() {
        let cache = random_cache(8, 8, 3, 13);
        let cfg = AdapterConfig::new(3, 2, Mode::HiP, 0);
        let st = random_state(&cache, 2, 14);
        let once = retract(&st, &cache, &cfg).unwrap();
        let twice = retract(&once, &cache, &cfg).unwrap();
        assert!(once.b.max_abs_diff(&twice.b).unwrap() < 1e-12);
        assert!(once.a.max_abs_diff(&twice.a).unwrap() < 1e-12);
        assert!(complement_violation(&once, &cache).unwrap() < 1e-10);

        let mut rank1 = AdapterState::zeros(&cache, 2);
        let c = [0.3, -1.2];
        rank1.b = Matrix::from_fn(8, 2, |i, j| cache.u.get(i, 0) * c[j]);
        let r = retract(&rank1, &cache, &cfg).unwrap();
        assert!(r.b.max_abs() < 1e-12);
    }

    #[test]
    fn plain_lora_is_textbook() {
        let cache = random_cache(6, 5, 2, 15);
        let cfg = AdapterConfig::new(2, 2, Mode::PlainLoRA, 0);
        let mut st = random_state(&cache, 2, 16);
        st.phi = vec![0.0; 2];
        let dw = delta_w(&st, &cache, &cfg).unwrap();
        let textbook = st.b.matmul(&st.a).unwrap().scale(cfg.alpha / cfg.r as f64);
        assert_eq!(dw, textbook);
        assert!(retract(&st, &cache, &cfg).is_err());
    }

    #[test]
    fn phi_rejected_outside_hip() {
        let cache = random_cache(6, 5, 2, 15);
        let st = random_state(&cache, 2, 16);
        for mode in [Mode::PlainLoRA, Mode::ProjLoRA] {
            let cfg = AdapterConfig::new(2, 2, mode, 0);
            assert!(matches!(delta_w(&st, &cache, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let cache = random_cache(6, 5, 2, 15);
        let mut st = AdapterState::zeros(&cache, 2);
        st.b = Matrix::zeros(5, 2);
        assert!(matches!(
            project_factors(&st, &cache),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = AdapterConfig::new(8, 4, Mode::HiP, 0);
        assert_eq!(c.alpha, 8.0);
        assert_eq!(c.scale(), 2.0);
        let mut bad = c.clone();
        bad.r = 0;
        assert!(bad.validate().is_err());
        assert_eq!("projlora".parse::<Mode>().unwrap(), Mode::ProjLoRA);
    }
}
